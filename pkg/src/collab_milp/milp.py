"""Problem representation for mixed-integer linear programs.

Instances are always stored in minimization form. Row senses are kept as
given (``L`` for <=, ``G`` for >=, ``E`` for ==); the LP solver adds one
slack per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

LE, GE, EQ = "L", "G", "E"
SENSES = (LE, GE, EQ)


@dataclass(frozen=True)
class Tolerances:
    tol_feas: float = 1e-6
    tol_int: float = 1e-6
    tol_dual: float = 1e-6
    # None means 50 * (n + m), resolved per solve
    max_lp_iterations: int | None = None

    def __post_init__(self):
        for name in ("tol_feas", "tol_int", "tol_dual"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.max_lp_iterations is not None and self.max_lp_iterations <= 0:
            raise ValueError("max_lp_iterations must be strictly positive")

    def iteration_cap(self, n: int, m: int) -> int:
        if self.max_lp_iterations is not None:
            return self.max_lp_iterations
        return 50 * (n + m)


DEFAULT_TOL = Tolerances()


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MilpInstance:
    """min c^T x  s.t.  A x (sense) b,  lb <= x <= ub,  x_i integer for i in integrality."""

    objective: np.ndarray
    A: np.ndarray
    senses: tuple[str, ...]
    rhs: np.ndarray
    integrality: tuple[int, ...] = ()
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    name: str = ""
    # stable identifiers per row; original rows use 0..m-1, cuts get fresh ids
    row_ids: tuple[int, ...] | None = None
    sense: str = field(default="minimize")

    def __post_init__(self):
        c = _frozen(self.objective)
        A = np.array(self.A, dtype=float, copy=True)
        if A.ndim != 2:
            A = A.reshape(-1, c.shape[0])
        A.flags.writeable = False
        m, n = A.shape
        if c.shape != (n,):
            raise ValueError(f"objective has length {c.shape[0]}, expected {n}")
        b = _frozen(self.rhs)
        if b.shape != (m,):
            raise ValueError(f"rhs has length {b.shape[0]}, expected {m}")
        senses = tuple(self.senses)
        if len(senses) != m or any(s not in SENSES for s in senses):
            raise ValueError("senses must give one of 'L', 'G', 'E' per row")
        if m and np.any(~np.any(A != 0.0, axis=1)):
            raise ValueError("every constraint row needs at least one nonzero")
        integ = tuple(int(i) for i in self.integrality)
        if len(set(integ)) != len(integ):
            raise ValueError("integrality indices must be unique")
        if any(i < 0 or i >= n for i in integ):
            raise ValueError("integrality index out of range")
        lb = _frozen(np.zeros(n) if self.lb is None else self.lb)
        ub = _frozen(np.full(n, np.inf) if self.ub is None else self.ub)
        if lb.shape != (n,) or ub.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(lb > ub):
            raise ValueError("lower bound exceeds upper bound")
        row_ids = tuple(range(m)) if self.row_ids is None else tuple(int(r) for r in self.row_ids)
        if len(row_ids) != m:
            raise ValueError("row_ids must have one entry per row")
        if self.sense != "minimize":
            raise ValueError("instances are stored in minimize form; negate c at ingestion")
        set_ = object.__setattr__
        set_(self, "objective", c)
        set_(self, "A", A)
        set_(self, "rhs", b)
        set_(self, "senses", senses)
        set_(self, "integrality", tuple(sorted(integ)))
        set_(self, "lb", lb)
        set_(self, "ub", ub)
        set_(self, "row_ids", row_ids)

    @classmethod
    def from_maximize(cls, objective, A, senses, rhs, **kw) -> "MilpInstance":
        return cls(-np.asarray(objective, dtype=float), A, senses, rhs, **kw)

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_cons(self) -> int:
        return self.A.shape[0]

    @property
    def is_integer(self) -> np.ndarray:
        mask = np.zeros(self.n_vars, dtype=bool)
        mask[list(self.integrality)] = True
        return mask

    def row_entries(self, i: int) -> list[tuple[int, float]]:
        (cols,) = np.nonzero(self.A[i])
        return [(int(j), float(self.A[i, j])) for j in cols]

    def with_bounds(self, lb, ub) -> "MilpInstance":
        return replace(self, lb=lb, ub=ub)

    def add_rows(self, rows: np.ndarray, senses: Sequence[str], rhs: Iterable[float],
                 row_ids: Sequence[int]) -> "MilpInstance":
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.size == 0:
            return self
        return replace(
            self,
            A=np.vstack([self.A, rows]),
            senses=self.senses + tuple(senses),
            rhs=np.concatenate([self.rhs, np.asarray(list(rhs), dtype=float)]),
            row_ids=self.row_ids + tuple(row_ids),
        )

    def __eq__(self, other):
        if not isinstance(other, MilpInstance):
            return NotImplemented
        return (
            self.name == other.name
            and self.senses == other.senses
            and self.integrality == other.integrality
            and self.row_ids == other.row_ids
            and np.array_equal(self.objective, other.objective)
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.rhs, other.rhs)
            and np.array_equal(self.lb, other.lb)
            and np.array_equal(self.ub, other.ub)
        )

    __hash__ = None


def lp_relax(instance: MilpInstance) -> MilpInstance:
    """Drop the integrality requirements."""
    if not instance.integrality:
        return instance
    return replace(instance, integrality=())


def objective_value(instance: MilpInstance, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({instance.n_vars},)")
    return float(instance.objective @ x)


def row_violations(instance: MilpInstance, x) -> np.ndarray:
    """Nonnegative violation of every row at x."""
    act = instance.A @ x
    b = instance.rhs
    viol = np.zeros(instance.n_cons)
    for i, s in enumerate(instance.senses):
        if s == LE:
            viol[i] = max(0.0, act[i] - b[i])
        elif s == GE:
            viol[i] = max(0.0, b[i] - act[i])
        else:
            viol[i] = abs(act[i] - b[i])
    return viol


def is_feasible(instance: MilpInstance, x, tol: Tolerances = DEFAULT_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({instance.n_vars},)")
    if np.any(x < instance.lb - tol.tol_feas) or np.any(x > instance.ub + tol.tol_feas):
        return False
    return not np.any(row_violations(instance, x) > tol.tol_feas)


def is_integer_feasible(x, instance: MilpInstance, tol: Tolerances = DEFAULT_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n_vars,):
        raise ValueError(f"x has shape {x.shape}, expected ({instance.n_vars},)")
    idx = list(instance.integrality)
    if idx and np.any(np.abs(x[idx] - np.round(x[idx])) > tol.tol_int):
        return False
    return is_feasible(instance, x, tol)


def fractional_candidates(x, instance: MilpInstance, tol: Tolerances = DEFAULT_TOL) -> list[int]:
    """Integer-constrained variables whose value is fractional beyond tol_int."""
    idx = np.asarray(instance.integrality, dtype=int)
    if idx.size == 0:
        return []
    vals = np.asarray(x)[idx]
    frac = np.abs(vals - np.round(vals))
    return [int(i) for i in idx[frac > tol.tol_int]]
