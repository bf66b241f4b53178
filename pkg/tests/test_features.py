import math

import numpy as np
import pytest

from collab_milp.bnc import HeuristicCutSelector, solve
from collab_milp.cuts import CutPool, apply_cuts, compute_cut_features, generate_gomory_cuts
from collab_milp.features import (
    CONS_FEATURE_NAMES,
    VAR_FEATURE_NAMES,
    AgeCounters,
    IncumbentStats,
    extract_bipartite,
    extract_cut_state,
)
from collab_milp.instances import gen_cfl, gen_set_covering
from collab_milp.milp import MilpInstance
from collab_milp.simplex import BasisStatus, solve_lp

from conftest import small_knapsack

V = {name: i for i, name in enumerate(VAR_FEATURE_NAMES)}
C = {name: i for i, name in enumerate(CONS_FEATURE_NAMES)}


def scripted_state(sol, inst):
    """Field-by-field recomputation with plain loops."""
    m, n = inst.n_cons, inst.n_vars
    c = list(inst.objective)
    c_norm = math.sqrt(sum(v * v for v in c))
    cons = np.zeros((m, 5))
    for i in range(m):
        sgn = -1.0 if inst.senses[i] == "G" else 1.0
        row = [sgn * v for v in inst.A[i]]
        norm = math.sqrt(sum(v * v for v in row))
        cons[i, 0] = sum(a * b for a, b in zip(row, c)) / (norm * c_norm)
        cons[i, 1] = sgn * inst.rhs[i] / norm
        act = sum(a * b for a, b in zip(inst.A[i], sol.x))
        cons[i, 2] = float(abs(act - inst.rhs[i]) <= 1e-6)
        cons[i, 3] = sgn * sol.duals[i] / (1 + c_norm)
    var = np.zeros((n, 19))
    for j in range(n):
        integer = j in inst.integrality
        binary = integer and inst.lb[j] == 0 and inst.ub[j] == 1
        var[j, 0] = binary
        var[j, 1] = integer and not binary
        var[j, 3] = not integer
        var[j, 4] = c[j] / c_norm
        var[j, 5] = math.isfinite(inst.lb[j])
        var[j, 6] = math.isfinite(inst.ub[j])
        var[j, 7] = math.isfinite(inst.lb[j]) and abs(sol.x[j] - inst.lb[j]) <= 1e-6
        var[j, 8] = math.isfinite(inst.ub[j]) and abs(sol.x[j] - inst.ub[j]) <= 1e-6
        var[j, 9] = abs(sol.x[j] - round(sol.x[j])) if integer else 0.0
        var[j, 10 + int(sol.basis[j])] = 1.0
        var[j, 14] = sol.reduced_costs[j] / (1 + c_norm)
        var[j, 16] = var[j, 17] = var[j, 18] = sol.x[j]
    return cons, var


@pytest.mark.parametrize("make", [lambda: gen_set_covering(20, 12, 0.25, seed=3),
                                  lambda: gen_cfl(5, 3, seed=1)])
def test_state_matches_scripted_recomputation(make):
    inst = make()
    sol = solve_lp(inst)
    state = extract_bipartite(sol, inst)
    cons, var = scripted_state(sol, inst)
    assert np.allclose(state.C, cons, atol=1e-10, rtol=0)
    assert np.allclose(state.V, var, atol=1e-10, rtol=0)
    dense = state.dense_edges()
    sign = np.where(np.array(inst.senses) == "G", -1.0, 1.0)[:, None]
    rows = inst.A * sign
    assert np.allclose(dense, rows / np.linalg.norm(rows, axis=1, keepdims=True), atol=1e-12)


def test_trivial_feature_values():
    inst = MilpInstance([1.0, 1.0], [[1.0, 1.0], [1.0, 0.0]], ["L", "L"], [3.0, 2.0],
                        integrality=[0, 1], ub=[5.0, 5.0])
    sol = solve_lp(inst)
    state = extract_bipartite(sol, inst)
    assert state.C[0, C["obj_cos_sim"]] == pytest.approx(1.0)
    # minimizing a positive objective leaves both variables at their lower bound
    assert state.V[0, V["sol_is_at_lb"]] == 1.0 and state.V[0, V["sol_is_at_ub"]] == 0.0
    assert state.V[0, V["type_integer"]] == 1.0


def test_incumbent_and_age_features():
    inst = gen_set_covering(15, 10, 0.3, seed=2)
    sol = solve_lp(inst)
    stats = IncumbentStats()
    stats.update(np.ones(15))
    stats.update(np.zeros(15))
    ages = AgeCounters()
    ages.observe(sol, inst)
    ages.observe(sol, inst)
    state = extract_bipartite(sol, inst, stats, ages)
    assert np.all(state.V[:, V["inc_val"]] == 0.0)
    assert np.all(state.V[:, V["avg_inc_val"]] == 0.5)
    nonbasic = sol.basis != BasisStatus.BASIC
    assert np.allclose(state.V[nonbasic, V["age"]], 1.0)
    assert np.allclose(state.V[~nonbasic, V["age"]], 0.0)
    assert np.all((state.C[:, C["age"]] == 0) | (state.C[:, C["age"]] == 1))


def test_cut_state():
    inst = gen_set_covering(30, 20, 0.15, seed=0)
    sol = solve_lp(inst)
    pool = generate_gomory_cuts(sol, inst)
    cs = extract_cut_state(pool, sol, inst)
    assert cs.cut_features.shape == (len(pool.cuts), 13)
    for i, cut in enumerate(pool.cuts):
        assert np.array_equal(cs.cut_features[i], compute_cut_features(cut, sol, inst).as_array())
    empty = extract_cut_state(CutPool(parent_lp_objective=sol.objective), sol, inst)
    assert empty.pool_size == 0 and empty.graph.n_cons == inst.n_cons


def test_selected_cuts_show_up_as_rows():
    inst = gen_set_covering(30, 20, 0.15, seed=0)
    sol = solve_lp(inst)
    pool = generate_gomory_cuts(sol, inst)
    chosen = pool.cuts[:2]
    tighter = apply_cuts(inst, chosen)
    state = extract_bipartite(solve_lp(tighter), tighter)
    assert state.n_cons == inst.n_cons + len(chosen)
    dense = state.dense_edges()
    for k, cut in enumerate(chosen):
        row = -cut.coeffs  # >= rows are flipped to <=
        assert np.allclose(dense[inst.n_cons + k], row / np.linalg.norm(row), atol=1e-12)


def test_states_are_finite_throughout_a_solve():
    seen = []

    class Spy(HeuristicCutSelector):
        def select_cuts(self, ctx):
            seen.append(ctx.state())
            return super().select_cuts(ctx)

    solve(small_knapsack(1, n=12, m=3, top=5), Spy())
    assert seen
    for cs in seen:
        for arr in (cs.cut_features, cs.graph.C, cs.graph.V, cs.graph.edge_attr):
            assert np.all(np.isfinite(arr))
