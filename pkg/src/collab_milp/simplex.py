"""Bounded-variable revised simplex with an explicit dense basis inverse.

The LP ``min c^T x, A x (sense) b, lb <= x <= ub`` is brought to the form
``[A I] (x, s) = b`` with one slack per row. Slack bounds encode the row
sense: ``[0, inf)`` for <=, ``(-inf, 0]`` for >=, ``[0, 0]`` for ==.

Cold starts run a composite primal simplex (phase 1 minimizes the sum of
bound violations). Warm starts from a dual feasible basis, the usual case
after bound changes or added rows, run the dual simplex. Both use Dantzig
pricing and fall back to Bland's rule after ``3 (n + m)`` degenerate pivots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .milp import DEFAULT_TOL, EQ, GE, LE, MilpInstance, Tolerances


class LpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITERATION_LIMIT = "IterationLimit"


class BasisStatus(enum.IntEnum):
    LOWER = 0
    BASIC = 1
    UPPER = 2
    ZERO = 3


# plain ints for the hot loops; enum attribute access is slow
_LO, _BA, _UP, _ZE = 0, 1, 2, 3

_PIVOT_TOL = 1e-9
_REFACTOR_EVERY = 64


@dataclass(frozen=True)
class WarmStart:
    """Basis description reusable on an LP with the same columns and possibly extra rows."""

    head: tuple[int, ...]
    status: np.ndarray  # BasisStatus per column (n + m)
    n_vars: int
    # inverse of the basis matrix of ``head``, if known
    binv: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    basis: np.ndarray  # BasisStatus per structural variable
    row_basis: np.ndarray  # BasisStatus per slack
    slacks: np.ndarray
    iterations: int
    head: tuple[int, ...]
    # kept for tableau access
    _binv: np.ndarray | None = None
    _matrix: np.ndarray | None = None
    _lower: np.ndarray | None = None
    _upper: np.ndarray | None = None

    @property
    def n_vars(self) -> int:
        return self.x.shape[0]

    @property
    def n_rows(self) -> int:
        return self.duals.shape[0]

    @property
    def full_x(self) -> np.ndarray:
        return np.concatenate([self.x, self.slacks])

    @property
    def full_status(self) -> np.ndarray:
        return np.concatenate([self.basis, self.row_basis])

    @property
    def column_lower(self) -> np.ndarray:
        return self._lower

    @property
    def column_upper(self) -> np.ndarray:
        return self._upper

    def basic_row(self, var: int) -> int:
        """Position of a basic column in the basis head."""
        try:
            return self.head.index(var)
        except ValueError:
            raise ValueError(f"column {var} is not basic") from None

    def tableau_row(self, var: int) -> tuple[np.ndarray, float]:
        """Row of B^-1 [A I] for basic column ``var`` and its current value.

        Coefficients cover all n + m columns; the entry of ``var`` itself is 1
        and the other basic columns are 0.
        """
        if self.status is not LpStatus.OPTIMAL or self._binv is None:
            raise ValueError("tableau is only available on optimal solutions")
        r = self.basic_row(var)
        row = self._binv[r] @ self._matrix
        for k, j in enumerate(self.head):
            row[j] = 1.0 if k == r else 0.0
        return row, float(self.full_x[var])

    def warm_start(self) -> WarmStart:
        return WarmStart(self.head, self.full_status.copy(), self.n_vars, self._binv)

    def dual_objective(self, rhs: np.ndarray) -> float:
        """b^T y + sum of reduced cost times bound over nonbasic columns."""
        d_full = np.concatenate([self.reduced_costs, -self.duals])
        nonbasic = self.full_status != BasisStatus.BASIC
        return float(rhs @ self.duals + d_full @ (self.full_x * nonbasic))


def slack_bounds(senses) -> tuple[np.ndarray, np.ndarray]:
    m = len(senses)
    lo = np.zeros(m)
    hi = np.zeros(m)
    for i, s in enumerate(senses):
        if s == LE:
            hi[i] = np.inf
        elif s == GE:
            lo[i] = -np.inf
        elif s != EQ:
            raise ValueError(f"unknown row sense {s!r}")
    return lo, hi


class _Simplex:
    def __init__(self, lp: MilpInstance, tol: Tolerances, lb, ub):
        self.n = n = lp.n_vars
        self.m = m = lp.n_cons
        self.tol = tol
        self.M = np.hstack([lp.A, np.eye(m)])
        self.b = np.asarray(lp.rhs, dtype=float)
        self.c = np.concatenate([lp.objective, np.zeros(m)])
        slo, shi = slack_bounds(lp.senses)
        self.L = np.concatenate([lb, slo])
        self.U = np.concatenate([ub, shi])
        self.N = n + m
        self.iterations = 0
        self.max_iter = tol.iteration_cap(n, m)
        self.degenerate = 0
        self.bland = False
        self.since_refactor = 0

    # -- basis bookkeeping -------------------------------------------------

    def cold_basis(self):
        self.head = list(range(self.n, self.N))
        self.status = np.empty(self.N, dtype=np.int8)
        self.status[self.n:] = _BA
        for j in range(self.n):
            self.status[j] = self._default_status(j)
        self.binv = np.eye(self.m)
        self.since_refactor = 0

    def _default_status(self, j):
        if np.isfinite(self.L[j]):
            return _LO
        if np.isfinite(self.U[j]):
            return _UP
        return _ZE

    def load_warm(self, ws: WarmStart) -> bool:
        if ws.n_vars != self.n:
            return False
        old_m = len(ws.head)
        if old_m > self.m or ws.status.shape[0] != self.n + old_m:
            return False
        # new rows get their slack basic; columns n + i stay slack i
        head = list(ws.head) + list(range(self.n + old_m, self.N))
        status = np.empty(self.N, dtype=np.int8)
        status[: self.n + old_m] = ws.status
        status[self.n + old_m:] = _BA
        lo_f, up_f = np.isfinite(self.L), np.isfinite(self.U)
        bad = (((status == _LO) & ~lo_f) | ((status == _UP) & ~up_f)
               | ((status == _ZE) & (lo_f | up_f)))
        status[bad] = np.where(lo_f, _LO, np.where(up_f, _UP, _ZE))[bad]
        self.head = head
        self.status = status
        if ws.binv is not None and ws.binv.shape == (old_m, old_m) and self._adopt_inverse(ws.binv):
            return True
        try:
            self.refactor()
        except np.linalg.LinAlgError:
            return False
        return True

    def _adopt_inverse(self, binv0: np.ndarray) -> bool:
        """Reuse a known inverse; appended rows with basic slacks extend it blockwise."""
        old_m, m = binv0.shape[0], self.m
        if old_m == m:
            binv = binv0.copy()
        else:
            # B = [[B0, 0], [R, I]]  =>  B^-1 = [[B0^-1, 0], [-R B0^-1, I]]
            R = self.M[old_m:, self.head[:old_m]]
            binv = np.zeros((m, m))
            binv[:old_m, :old_m] = binv0
            binv[old_m:, :old_m] = -R @ binv0
            binv[old_m:, old_m:] = np.eye(m - old_m)
        ones = np.ones(m)
        if m and not np.allclose(binv @ (self.M[:, self.head] @ ones), ones, rtol=0.0, atol=1e-8):
            return False
        self.binv = binv
        self.since_refactor = 0
        return True

    def refactor(self):
        B = self.M[:, self.head]
        self.binv = np.linalg.inv(B)
        self.since_refactor = 0

    def nonbasic_values(self) -> np.ndarray:
        x = np.zeros(self.N)
        st = self.status
        low = st == _LO
        up = st == _UP
        x[low] = self.L[low]
        x[up] = self.U[up]
        return x

    def primal_values(self) -> np.ndarray:
        x = self.nonbasic_values()
        xb = self.binv @ (self.b - self.M @ x)
        x[self.head] = xb
        return x

    def pivot(self, r: int, q: int, alpha: np.ndarray, leave_status: int):
        p = self.head[r]
        self.status[p] = leave_status
        self.status[q] = _BA
        self.head[r] = q
        self.since_refactor += 1
        if self.since_refactor >= _REFACTOR_EVERY:
            self.refactor()
        else:
            pr = self.binv[r] / alpha[r]
            self.binv -= np.outer(alpha, pr)
            self.binv[r] = pr

    def _tick(self, step: float):
        self.iterations += 1
        if step <= self.tol.tol_feas * 1e-3:
            self.degenerate += 1
            if self.degenerate >= 3 * self.N:
                self.bland = True

    # -- primal simplex ----------------------------------------------------

    def primal(self) -> LpStatus:
        tol = self.tol
        while True:
            if self.iterations >= self.max_iter:
                return LpStatus.ITERATION_LIMIT
            x = self.primal_values()
            xb = x[self.head]
            Lb = self.L[self.head]
            Ub = self.U[self.head]
            below = xb < Lb - tol.tol_feas
            above = xb > Ub + tol.tol_feas
            phase1 = bool(below.any() or above.any())
            if phase1:
                cb = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                y = cb @ self.binv
                d = -(y @ self.M)
            else:
                y = self.c[self.head] @ self.binv
                d = self.c - y @ self.M
            q, direction = self._price(d)
            if q < 0:
                return LpStatus.INFEASIBLE if phase1 else LpStatus.OPTIMAL
            alpha = self.binv @ self.M[:, q]
            # x_B moves by -direction * alpha * theta
            g = -direction * alpha
            theta, r, leave_status = self._primal_ratio(xb, Lb, Ub, g, below, above)
            span = self.U[q] - self.L[q]
            if span < theta:
                theta, r = span, -1
            if not np.isfinite(theta):
                if phase1:
                    return LpStatus.INFEASIBLE
                return LpStatus.UNBOUNDED
            self._tick(theta)
            if r < 0:
                self.status[q] = _UP if direction > 0 else _LO
                continue
            self.pivot(r, q, alpha, leave_status)

    def _price(self, d):
        st = self.status
        tol = self.tol.tol_dual
        movable = self.L < self.U
        inc = movable & ((st == _LO) | (st == _ZE)) & (d < -tol)
        dec = movable & ((st == _UP) | (st == _ZE)) & (d > tol)
        elig = inc | dec
        if not elig.any():
            return -1, 0
        if self.bland:
            q = int(np.flatnonzero(elig)[0])
        else:
            q = int(np.argmax(np.where(elig, np.abs(d), -1.0)))
        return q, (1 if inc[q] else -1)

    def _primal_ratio(self, xb, Lb, Ub, g, below, above):
        ftol = self.tol.tol_feas
        m = xb.shape[0]
        limits = np.full(m, np.inf)
        bound_hit = np.zeros(m, dtype=np.int8)
        dec = g < -_PIVOT_TOL
        inc = g > _PIVOT_TOL
        # decreasing basics stop at their lower bound, or at the upper bound when coming from above
        lo_target = np.where(above, Ub, Lb)
        mask = dec & ~below & np.isfinite(lo_target)
        limits[mask] = np.maximum(xb[mask] - lo_target[mask], 0.0) / -g[mask]
        bound_hit[mask] = np.where(above[mask], _UP, _LO)
        hi_target = np.where(below, Lb, Ub)
        mask = inc & ~above & np.isfinite(hi_target)
        limits[mask] = np.maximum(hi_target[mask] - xb[mask], 0.0) / g[mask]
        bound_hit[mask] = np.where(below[mask], _LO, _UP)
        theta = limits.min() if m else np.inf
        if not np.isfinite(theta):
            return np.inf, -1, 0
        ties = np.flatnonzero(limits <= theta + ftol * 1e-3)
        if self.bland:
            r = int(min(ties, key=lambda k: self.head[k]))
        else:
            r = int(ties[np.argmax(np.abs(g[ties]))])
        return float(limits[r]), r, int(bound_hit[r])

    # -- dual simplex ------------------------------------------------------

    def dual_feasible(self, d) -> bool:
        st = self.status
        tol = self.tol.tol_dual
        movable = self.L < self.U
        bad = movable & (
            ((st == _LO) & (d < -tol))
            | ((st == _UP) & (d > tol))
            | ((st == _ZE) & (np.abs(d) > tol))
        )
        return not bad.any()

    def dual(self) -> LpStatus | None:
        """Run the dual simplex; None signals loss of dual feasibility."""
        tol = self.tol
        while True:
            if self.iterations >= self.max_iter:
                return LpStatus.ITERATION_LIMIT
            y = self.c[self.head] @ self.binv
            d = self.c - y @ self.M
            if not self.dual_feasible(d):
                return None
            x = self.primal_values()
            xb = x[self.head]
            Lb = self.L[self.head]
            Ub = self.U[self.head]
            infeas = np.maximum(Lb - xb, 0.0) + np.maximum(xb - Ub, 0.0)
            cand = infeas > tol.tol_feas
            if not cand.any():
                return LpStatus.OPTIMAL
            if self.bland:
                rows = np.flatnonzero(cand)
                r = int(min(rows, key=lambda k: self.head[k]))
            else:
                r = int(np.argmax(infeas))
            to_lower = xb[r] < Lb[r]
            row = self.binv[r] @ self.M
            a = row if to_lower else -row
            st = self.status
            nonbasic = (st != _BA) & (self.L < self.U)
            elig = nonbasic & (
                (((st == _LO) | (st == _ZE)) & (a < -_PIVOT_TOL))
                | (((st == _UP) | (st == _ZE)) & (a > _PIVOT_TOL))
            )
            if not elig.any():
                return LpStatus.INFEASIBLE
            idx = np.flatnonzero(elig)
            ratios = np.maximum(np.abs(d[idx]), 0.0) / np.abs(a[idx])
            # ZERO-status columns must keep d = 0
            ratios = np.where(st[idx] == _ZE, 0.0, ratios)
            tmin = ratios.min()
            ties = idx[ratios <= tmin + 1e-12]
            if self.bland:
                q = int(ties[0])
            else:
                q = int(ties[np.argmax(np.abs(a[ties]))])
            alpha = self.binv @ self.M[:, q]
            self._tick(tmin)
            self.pivot(r, q, alpha, _LO if to_lower else _UP)

    # -- result ------------------------------------------------------------

    def result(self, status: LpStatus) -> LpSolution:
        n, m = self.n, self.m
        if status is LpStatus.OPTIMAL:
            if self.since_refactor:
                self.refactor()
            x = self.primal_values()
            y = self.c[self.head] @ self.binv
            d = self.c - y @ self.M
            d[self.head] = 0.0
            obj = float(self.c[:n] @ x[:n])
        else:
            x = self.primal_values() if hasattr(self, "binv") else np.zeros(self.N)
            y = np.zeros(m)
            d = np.zeros(self.N)
            obj = {LpStatus.INFEASIBLE: np.inf, LpStatus.UNBOUNDED: -np.inf}.get(status, float(self.c[:n] @ x[:n]))
        st = self.status.astype(np.int8)
        x.flags.writeable = False
        return LpSolution(
            status=status,
            x=x[:n],
            objective=obj,
            duals=y,
            reduced_costs=d[:n],
            basis=st[:n].copy(),
            row_basis=st[n:].copy(),
            slacks=x[n:],
            iterations=self.iterations,
            head=tuple(int(h) for h in self.head),
            _binv=self.binv if status is LpStatus.OPTIMAL else None,
            _matrix=self.M,
            _lower=self.L,
            _upper=self.U,
        )


def solve_lp(lp: MilpInstance, tol: Tolerances = DEFAULT_TOL, *, lb=None, ub=None,
             warm: WarmStart | None = None) -> LpSolution:
    """Solve the LP relaxation of ``lp`` (integrality is ignored).

    ``lb``/``ub`` override the instance's variable bounds, as branching does.
    ``warm`` is a basis from a previous solve over the same columns.
    """
    lb = lp.lb if lb is None else np.asarray(lb, dtype=float)
    ub = lp.ub if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub + tol.tol_feas):
        sx = _Simplex(lp, tol, np.minimum(lb, ub), ub)
        sx.cold_basis()
        return sx.result(LpStatus.INFEASIBLE)
    sx = _Simplex(lp, tol, lb, ub)
    status = None
    if warm is not None and sx.load_warm(warm):
        status = sx.dual()
        if status is LpStatus.INFEASIBLE or status is LpStatus.ITERATION_LIMIT:
            return sx.result(status)
        if status is None:
            sx.degenerate = 0
            sx.bland = False
    else:
        sx.cold_basis()
    status = sx.primal()
    if status is LpStatus.OPTIMAL and sx.since_refactor:
        # recheck after a fresh factorization; drift can leave tiny violations
        sx.refactor()
        status = sx.primal()
    return sx.result(status)
