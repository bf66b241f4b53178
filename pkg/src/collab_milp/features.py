"""Bipartite constraint/variable state and the cut-selection state built on it.

Rows are put in a canonical "<=" orientation before featurization: ">="
rows (and therefore every Gomory cut) are negated together with their
right-hand side and dual value. Equality rows keep their stored sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cuts import N_CUT_FEATURES, CutPool
from .milp import GE, MilpInstance
from .simplex import BasisStatus, LpSolution, LpStatus

N_CONS_FEATURES = 5
N_VAR_FEATURES = 19
CONS_FEATURE_NAMES = ("obj_cos_sim", "bias", "is_tight", "dualsol_val", "age")
VAR_FEATURE_NAMES = (
    "type_binary", "type_integer", "type_impl_integer", "type_continuous",
    "coef", "has_lb", "has_ub", "sol_is_at_lb", "sol_is_at_ub", "sol_frac",
    "basis_lower", "basis_basic", "basis_upper", "basis_zero",
    "reduced_cost", "age", "sol_val", "inc_val", "avg_inc_val",
)

_CLAMP = 1e6
_AT_BOUND = 1e-6


@dataclass
class IncumbentStats:
    """Best solution so far and the running mean of every incumbent found."""

    incumbent: np.ndarray | None = None
    total: np.ndarray | None = None
    count: int = 0

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        self.incumbent = x.copy()
        self.total = x.copy() if self.total is None else self.total + x
        self.count += 1

    @property
    def average(self) -> np.ndarray | None:
        return None if self.total is None else self.total / self.count


@dataclass
class AgeCounters:
    """Consecutive-LP ages: rows count LPs while not tight, variables while nonbasic."""

    total_lps: int = 0
    row_age: dict = field(default_factory=dict)
    var_age: np.ndarray | None = None

    def observe(self, sol: LpSolution, instance: MilpInstance, tol: float = 1e-6) -> None:
        if sol.status is not LpStatus.OPTIMAL:
            return
        self.total_lps += 1
        if self.var_age is None:
            self.var_age = np.zeros(instance.n_vars)
        nonbasic = sol.basis != BasisStatus.BASIC
        self.var_age = np.where(nonbasic, self.var_age + 1, 0.0)
        tight = _tight_rows(sol, instance, tol)
        for rid, t in zip(instance.row_ids, tight):
            self.row_age[rid] = 0 if t else self.row_age.get(rid, 0) + 1


def _tight_rows(sol: LpSolution, instance: MilpInstance, tol: float) -> np.ndarray:
    return np.abs(sol.slacks) <= tol


@dataclass(eq=False)
class BipartiteState:
    C: np.ndarray  # (m, 5)
    edge_index: np.ndarray  # (2, nnz) rows then columns
    edge_attr: np.ndarray  # (nnz,)
    V: np.ndarray  # (n, 19)

    @property
    def n_cons(self) -> int:
        return self.C.shape[0]

    @property
    def n_vars(self) -> int:
        return self.V.shape[0]

    def dense_edges(self) -> np.ndarray:
        E = np.zeros((self.n_cons, self.n_vars))
        E[self.edge_index[0], self.edge_index[1]] = self.edge_attr
        return E


@dataclass(eq=False)
class CutState:
    cut_features: np.ndarray  # (pool, 13)
    graph: BipartiteState

    def __post_init__(self):
        if self.cut_features.ndim != 2 or self.cut_features.shape[1] != N_CUT_FEATURES:
            raise ValueError("cut features must have 13 columns")

    @property
    def pool_size(self) -> int:
        return self.cut_features.shape[0]


def canonical_rows(instance: MilpInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows, rhs and orientation sign with >= rows flipped to <=."""
    sign = np.array([-1.0 if s == GE else 1.0 for s in instance.senses])
    return instance.A * sign[:, None], instance.rhs * sign, sign


def _clean(a: np.ndarray) -> np.ndarray:
    return np.clip(np.nan_to_num(a, nan=0.0, posinf=_CLAMP, neginf=-_CLAMP), -_CLAMP, _CLAMP)


def extract_bipartite(sol: LpSolution, instance: MilpInstance,
                      incumbent_stats: IncumbentStats | None = None,
                      ages: AgeCounters | None = None, tol: float = 1e-6) -> BipartiteState:
    if sol.status is not LpStatus.OPTIMAL:
        raise ValueError("state extraction needs an optimal LP solution")
    A, b, sign = canonical_rows(instance)
    m, n = A.shape
    c = instance.objective
    c_norm = float(np.linalg.norm(c))
    row_norm = np.linalg.norm(A, axis=1)
    safe_rows = np.where(row_norm > 0, row_norm, 1.0)
    total_lps = max(1, ages.total_lps if ages is not None else 1)

    C = np.zeros((m, N_CONS_FEATURES))
    if m:
        C[:, 0] = (A @ c) / (safe_rows * c_norm) if c_norm > 0 else 0.0
        C[:, 1] = b / safe_rows
        C[:, 2] = _tight_rows(sol, instance, tol).astype(float)
        C[:, 3] = sol.duals * sign / (1.0 + c_norm)
        if ages is not None:
            C[:, 4] = np.array([ages.row_age.get(r, 0) for r in instance.row_ids]) / total_lps
        C[:, 0] = np.clip(C[:, 0], -1.0, 1.0)

    rows, cols = np.nonzero(A)
    edge_index = np.vstack([rows, cols]).astype(np.int64)
    edge_attr = A[rows, cols] / safe_rows[rows]

    V = np.zeros((n, N_VAR_FEATURES))
    is_int = instance.is_integer
    binary = is_int & (instance.lb == 0.0) & (instance.ub == 1.0)
    V[:, 0] = binary
    V[:, 1] = is_int & ~binary
    # slot 2 (implicit integer) is never produced
    V[:, 3] = ~is_int
    V[:, 4] = c / c_norm if c_norm > 0 else 0.0
    lo, hi = sol.column_lower[:n], sol.column_upper[:n]
    x = sol.x
    V[:, 5] = np.isfinite(lo)
    V[:, 6] = np.isfinite(hi)
    V[:, 7] = np.isfinite(lo) & (np.abs(x - np.where(np.isfinite(lo), lo, 0.0)) <= _AT_BOUND)
    V[:, 8] = np.isfinite(hi) & (np.abs(x - np.where(np.isfinite(hi), hi, 0.0)) <= _AT_BOUND)
    V[:, 9] = np.where(is_int, np.abs(x - np.round(x)), 0.0)
    V[np.arange(n), 10 + sol.basis.astype(int)] = 1.0
    V[:, 14] = sol.reduced_costs / (1.0 + c_norm)
    if ages is not None and ages.var_age is not None:
        V[:, 15] = ages.var_age / total_lps
    V[:, 16] = x
    inc = incumbent_stats.incumbent if incumbent_stats is not None else None
    avg = incumbent_stats.average if incumbent_stats is not None else None
    V[:, 17] = x if inc is None else inc
    V[:, 18] = x if avg is None else avg
    return BipartiteState(_clean(C), edge_index, _clean(edge_attr), _clean(V))


def extract_cut_state(pool: CutPool, sol: LpSolution, instance: MilpInstance,
                      incumbent_stats: IncumbentStats | None = None,
                      ages: AgeCounters | None = None,
                      graph: BipartiteState | None = None) -> CutState:
    if graph is None:
        graph = extract_bipartite(sol, instance, incumbent_stats, ages)
    return CutState(_clean(pool.feature_matrix()), graph)
