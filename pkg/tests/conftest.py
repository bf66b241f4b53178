"""Shared oracles and fixtures.

The oracles here deliberately avoid the package's own solver code: pure
integer programs are solved by brute force over the box, mixed programs by
enumerating the integer part and handing the rest to scipy's LP solver.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from collab_milp.features import BipartiteState, CutState
from collab_milp.milp import MilpInstance


def lattice_points(inst: MilpInstance) -> np.ndarray:
    """Every integer point of the variable box (pure integer, bounded instances)."""
    ranges = [range(int(np.ceil(lo)), int(np.floor(hi)) + 1) for lo, hi in zip(inst.lb, inst.ub)]
    return np.array(list(itertools.product(*ranges)), dtype=float).reshape(-1, inst.n_vars)


def feasible_mask(inst: MilpInstance, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    act = pts @ inst.A.T
    ok = np.ones(len(pts), dtype=bool)
    for i, s in enumerate(inst.senses):
        if s == "L":
            ok &= act[:, i] <= inst.rhs[i] + tol
        elif s == "G":
            ok &= act[:, i] >= inst.rhs[i] - tol
        else:
            ok &= np.abs(act[:, i] - inst.rhs[i]) <= tol
    return ok


def brute_force_optimum(inst: MilpInstance) -> float:
    """Optimal objective; +inf when infeasible."""
    if len(inst.integrality) == inst.n_vars:
        pts = lattice_points(inst)
        pts = pts[feasible_mask(inst, pts)]
        return float((pts @ inst.objective).min()) if len(pts) else np.inf
    return mixed_optimum(inst)


def _linprog_rows(inst: MilpInstance):
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    for row, s, b in zip(inst.A, inst.senses, inst.rhs):
        if s == "L":
            A_ub.append(row)
            b_ub.append(b)
        elif s == "G":
            A_ub.append(-row)
            b_ub.append(-b)
        else:
            A_eq.append(row)
            b_eq.append(b)
    as_arr = lambda a, shape: np.array(a).reshape(shape) if a else None  # noqa: E731
    n = inst.n_vars
    return (as_arr(A_ub, (-1, n)), np.array(b_ub) if b_ub else None,
            as_arr(A_eq, (-1, n)), np.array(b_eq) if b_eq else None)


def scipy_lp(inst: MilpInstance, lb=None, ub=None):
    A_ub, b_ub, A_eq, b_eq = _linprog_rows(inst)
    lb = inst.lb if lb is None else lb
    ub = inst.ub if ub is None else ub
    bounds = [(lo, None if np.isinf(hi) else hi) for lo, hi in zip(lb, ub)]
    bounds = [(None if lo is not None and np.isinf(lo) else lo, hi) for lo, hi in bounds]
    return linprog(inst.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                   method="highs", options={"primal_feasibility_tolerance": 1e-10,
                                            "dual_feasibility_tolerance": 1e-10})


def mixed_optimum(inst: MilpInstance) -> float:
    """Enumerate the integer variables, solve an LP over the continuous ones."""
    ints = list(inst.integrality)
    ranges = [range(int(inst.lb[j]), int(inst.ub[j]) + 1) for j in ints]
    best = np.inf
    for combo in itertools.product(*ranges):
        lb, ub = inst.lb.copy(), inst.ub.copy()
        lb[ints] = combo
        ub[ints] = combo
        res = scipy_lp(inst, lb, ub)
        if res.status == 0:
            best = min(best, float(res.fun))
    return best


def random_graph(rng, m=6, n=9, density=0.4) -> BipartiteState:
    E = (rng.random((m, n)) < density) * rng.standard_normal((m, n))
    r, c = np.nonzero(E)
    return BipartiteState(rng.standard_normal((m, 5)), np.vstack([r, c]), E[r, c],
                          rng.standard_normal((n, 19)))


def random_cut_state(rng, pool=5, m=6, n=9) -> CutState:
    return CutState(rng.standard_normal((pool, 13)), random_graph(rng, m, n))


def small_knapsack(seed: int, n: int = 6, m: int = 2, top: int = 3) -> MilpInstance:
    """Bounded pure-integer packing instance, small enough to enumerate."""
    rng = np.random.default_rng(seed)
    A = rng.integers(1, 10, (m, n)).astype(float)
    b = np.floor(A.sum(1) * rng.uniform(0.3, 0.6, m))
    c = -rng.integers(1, 15, n).astype(float)
    return MilpInstance(c, A, ("L",) * m, b, tuple(range(n)), np.zeros(n), np.full(n, float(top)),
                        name=f"knap-{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
