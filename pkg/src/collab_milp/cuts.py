"""Gomory fractional cuts, their 13 selection features, and cut application."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .milp import DEFAULT_TOL, GE, MilpInstance, Tolerances
from .simplex import BasisStatus, LpSolution, LpStatus

N_CUT_FEATURES = 13
CUT_FEATURE_NAMES = (
    "coeff_mean", "coeff_max", "coeff_min", "coeff_std",
    "obj_coeff_mean", "obj_coeff_max", "obj_coeff_min", "obj_coeff_std",
    "parallelism", "efficacy", "support", "integral_support", "normalized_violation",
)

_ZERO = 1e-11
_SNAP = 1e-9


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Cut:
    """coeffs . x >= rhs"""

    coeffs: np.ndarray
    rhs: float
    source_row: int
    id: int
    sense: str = GE

    def __post_init__(self):
        if not np.any(self.coeffs != 0.0):
            raise ValueError("cut needs at least one nonzero coefficient")

    def violation(self, x) -> float:
        return float(self.rhs - self.coeffs @ np.asarray(x))


@dataclass(frozen=True)
class CutFeatures:
    coeff_mean: float
    coeff_max: float
    coeff_min: float
    coeff_std: float
    obj_coeff_mean: float
    obj_coeff_max: float
    obj_coeff_min: float
    obj_coeff_std: float
    parallelism: float
    efficacy: float
    support: float
    integral_support: float
    normalized_violation: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in CUT_FEATURE_NAMES], dtype=float)


@dataclass
class CutPool:
    cuts: list[Cut] = field(default_factory=list)
    features: list[CutFeatures] = field(default_factory=list)
    parent_lp_objective: float = float("nan")

    def __len__(self):
        return len(self.cuts)

    def feature_matrix(self) -> np.ndarray:
        if not self.features:
            return np.zeros((0, N_CUT_FEATURES))
        return np.stack([f.as_array() for f in self.features])


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < _SNAP, r, v)


def integral_slack_rows(instance: MilpInstance) -> np.ndarray:
    """Rows whose slack takes integer values at every integer-feasible point."""
    A = instance.A
    is_int = instance.is_integer
    ok = np.ones(instance.n_cons, dtype=bool)
    if instance.n_cons == 0:
        return ok
    ok &= ~np.any((A != 0.0) & ~is_int[None, :], axis=1)
    ok &= np.all(np.abs(A - np.round(A)) < _SNAP, axis=1)
    ok &= np.abs(instance.rhs - np.round(instance.rhs)) < _SNAP
    return ok


def generate_gomory_cuts(sol: LpSolution, instance: MilpInstance,
                         tol: Tolerances = DEFAULT_TOL) -> CutPool:
    """One Gomory fractional cut per fractional basic integer variable.

    Rows touching a nonbasic column that is not integer-valued (continuous
    variable, slack of a row with fractional data, fractional bound, free
    nonbasic) do not yield a valid fractional cut and are skipped.
    """
    if sol.status is not LpStatus.OPTIMAL:
        raise ValueError("Gomory cuts need an optimal LP solution")
    n, m = instance.n_vars, instance.n_cons
    if sol.n_vars != n or sol.n_rows != m:
        raise ValueError("solution does not belong to this instance")
    lower, upper = sol.column_lower, sol.column_upper
    is_int = instance.is_integer
    col_integral = np.concatenate([is_int, integral_slack_rows(instance)])
    status = np.asarray(sol.full_status)
    active = (lower != upper) & (status != int(BasisStatus.BASIC))
    at_lower = status == int(BasisStatus.LOWER)
    usable_col = col_integral & (status != int(BasisStatus.ZERO))
    pool = CutPool(parent_lp_objective=sol.objective)
    x = sol.x
    for var in sol.head:
        if var >= n or not is_int[var]:
            continue
        frac0 = x[var] - math.floor(x[var])
        if frac0 <= tol.tol_int or frac0 >= 1.0 - tol.tol_int:
            continue
        row, _ = sol.tableau_row(var)
        row[var] = 0.0
        J = np.flatnonzero((np.abs(row) > _ZERO) & active)
        at_lo = at_lower[J]
        bound = np.where(at_lo, lower[J], upper[J])
        if not np.all(usable_col[J]) or np.any(np.abs(bound - np.round(bound)) > _SNAP):
            continue
        sign = np.where(at_lo, 1.0, -1.0)
        coef = sign * row[J]
        f = coef - np.floor(coef)
        f[(f < _SNAP) | (f > 1.0 - _SNAP)] = 0.0
        # f * x'_j with x'_j = x_j - l_j  or  x'_j = u_j - x_j
        g = np.zeros(n + m)
        g[J] = sign * f
        rhs = frac0 + float(np.sum(sign * f * bound))
        coeffs = g[:n].copy()
        gs = g[n:]
        if m:
            # slack s_i = b_i - a_i x
            coeffs -= gs @ instance.A
            rhs -= float(gs @ instance.rhs)
        coeffs = _snap(np.where(np.abs(coeffs) < _ZERO, 0.0, coeffs))
        rhs = float(_snap(np.array([rhs]))[0])
        if not np.any(coeffs != 0.0):
            continue
        if rhs - coeffs @ x <= tol.tol_feas:
            continue
        cut = Cut(coeffs=coeffs, rhs=rhs, source_row=int(var), id=len(pool.cuts))
        pool.cuts.append(cut)
        pool.features.append(compute_cut_features(cut, sol, instance))
    return pool


def _stats(v: np.ndarray) -> tuple[float, float, float, float]:
    if v.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    return float(v.mean()), float(v.max()), float(v.min()), float(v.std())


def compute_cut_features(cut: Cut, sol: LpSolution, instance: MilpInstance) -> CutFeatures:
    a = np.asarray(cut.coeffs, dtype=float)
    scale = np.max(np.abs(a))
    if scale == 0.0:
        raise ValueError("zero-norm cut")
    a = a / scale
    rhs = cut.rhs / scale
    nz = a != 0.0
    c = instance.objective
    c_scale = np.max(np.abs(c)) if c.size else 0.0
    c_norm = c / c_scale if c_scale > 0 else c
    a_l2 = float(np.linalg.norm(a))
    c_l2 = float(np.linalg.norm(c))
    parallelism = float(a @ c) / (a_l2 * c_l2) if c_l2 > 0 else 0.0
    parallelism = min(1.0, max(-1.0, parallelism))
    viol = max(0.0, rhs - float(a @ sol.x))
    nnz = int(nz.sum())
    return CutFeatures(
        *_stats(a[nz]),
        *_stats(c_norm[nz]),
        parallelism=parallelism,
        efficacy=viol / a_l2,
        support=nnz / instance.n_vars,
        integral_support=int((nz & instance.is_integer).sum()) / nnz,
        normalized_violation=viol / max(1.0, abs(rhs)),
    )


def enumerate_integer_points(instance: MilpInstance, budget: int = 2 ** 22,
                             tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """All integer-feasible points of a bounded pure-integer instance."""
    n = instance.n_vars
    if len(instance.integrality) != n:
        raise ValueError("enumeration needs every variable to be integer")
    lo = np.ceil(instance.lb - tol.tol_int)
    hi = np.floor(instance.ub + tol.tol_int)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise EnumerationBudgetExceeded("unbounded variable domain")
    sizes = np.maximum(hi - lo + 1, 0).astype(np.int64)
    total = 1
    for s in sizes:
        total *= int(s)
        if total > budget:
            raise EnumerationBudgetExceeded(f"more than {budget} lattice points")
    if total == 0:
        return np.zeros((0, n))
    keep = []
    chunk = 1 << 16
    for first in range(0, total, chunk):
        code = np.arange(first, min(first + chunk, total), dtype=np.int64)
        pts = np.empty((code.shape[0], n))
        for j in range(n):
            pts[:, j] = lo[j] + code % sizes[j]
            code //= sizes[j]
        act = pts @ instance.A.T
        ok = np.ones(pts.shape[0], dtype=bool)
        for i, s in enumerate(instance.senses):
            if s == "L":
                ok &= act[:, i] <= instance.rhs[i] + tol.tol_feas
            elif s == "G":
                ok &= act[:, i] >= instance.rhs[i] - tol.tol_feas
            else:
                ok &= np.abs(act[:, i] - instance.rhs[i]) <= tol.tol_feas
        keep.append(pts[ok])
    return np.concatenate(keep)


def validate_cut(cut: Cut, instance: MilpInstance, budget: int = 2 ** 22,
                 points: np.ndarray | None = None) -> bool:
    """True iff no integer-feasible point of ``instance`` violates the cut."""
    if points is None:
        points = enumerate_integer_points(instance, budget)
    if points.shape[0] == 0:
        return True
    lhs = points @ cut.coeffs
    return bool(np.all(lhs >= cut.rhs - 1e-7 * max(1.0, abs(cut.rhs))))


def apply_cuts(instance: MilpInstance, selected: list[Cut]) -> MilpInstance:
    """Append the selected cuts as >= rows with fresh row ids."""
    if not selected:
        return instance
    start = (max(instance.row_ids) + 1) if instance.row_ids else 0
    return instance.add_rows(
        np.stack([c.coeffs for c in selected]),
        [GE] * len(selected),
        [c.rhs for c in selected],
        list(range(start, start + len(selected))),
    )
