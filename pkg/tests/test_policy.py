import itertools
import math
import struct
from collections import Counter

import numpy as np
import pytest
import torch
from scipy import stats

from collab_milp.features import BipartiteState, CutState
from collab_milp.policy import (
    Adam,
    ParamFormatError,
    ParamVersionError,
    branch_policy_forward,
    branch_policy_forward_batch,
    clip_grad_norm,
    cut_policy_forward,
    graph_encode,
    init_params,
    load_params,
    nll_loss,
    params_from_bytes,
    params_to_bytes,
    sample_branch_action,
    sample_cut_action,
    save_params,
    selection_probability,
)
from collab_milp.records import CutAction

from conftest import random_cut_state, random_graph

D = 16


def fd_check(params, loss_fn, rng, h=1e-4, tol=1e-4):
    """Central differences along a random unit direction per tensor."""
    params.requires_grad_(True)
    params.zero_grad()
    loss_fn().backward()
    # tensors the loss never touches have no grad; their differences must vanish
    grads = {k: torch.zeros_like(v) if v.grad is None else v.grad.clone()
             for k, v in params.tensors.items()}
    worst = 0.0
    for name, t in params.tensors.items():
        u = torch.from_numpy(rng.standard_normal(t.shape))
        u /= u.norm()
        with torch.no_grad():
            t += h * u
            fp = float(loss_fn())
            t -= 2 * h * u
            fm = float(loss_fn())
            t += h * u
        fd = (fp - fm) / (2 * h)
        ad = float((grads[name] * u).sum())
        rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
        worst = max(worst, rel)
        assert rel <= tol, (name, fd, ad)
    params.requires_grad_(False)
    return worst


# ---------------------------------------------------------------------------
# graph encoder


def test_zero_graph_pools_to_output_bias():
    p = init_params("branch", seed=0, d_h=D)
    p.tensors["g.out.w"] = torch.zeros_like(p["g.out.w"])
    g = BipartiteState(np.zeros((3, 5)), np.zeros((2, 0), dtype=int), np.zeros(0), np.zeros((4, 19)))
    emb = graph_encode(g, p)
    assert torch.equal(emb.pooled, p["g.out.b"])


def test_graph_encoder_is_permutation_equivariant(rng):
    p = init_params("branch", seed=1, d_h=D)
    g = random_graph(rng, 7, 10)
    vperm, cperm = rng.permutation(10), rng.permutation(7)
    vinv, cinv = np.argsort(vperm), np.argsort(cperm)
    h = BipartiteState(g.C[cperm], np.vstack([cinv[g.edge_index[0]], vinv[g.edge_index[1]]]),
                       g.edge_attr, g.V[vperm])
    a, b = graph_encode(g, p), graph_encode(h, p)
    assert torch.allclose(a.var[vperm], b.var, atol=1e-12)
    assert torch.allclose(a.cons[cperm], b.cons, atol=1e-12)
    assert torch.allclose(a.pooled, b.pooled, atol=1e-9)


def test_graph_encoder_gradients(rng):
    p = init_params("branch", seed=2, d_h=D)
    g = random_graph(rng)
    w = torch.from_numpy(rng.standard_normal(D))
    fd_check(p, lambda: (graph_encode(g, p).pooled * w).sum(), rng)


# ---------------------------------------------------------------------------
# cut policy


def test_cut_policy_gradients(rng):
    for seed in range(2):
        p = init_params("cut", seed=seed, d_h=D)
        cs = random_cut_state(rng, pool=5)
        action = CutAction(0.55, (3, 0, 4), ratio_z=0.2)
        fd_check(p, lambda: cut_policy_forward(cs, p).log_prob(action), rng)


def test_single_cut_pool_selects_with_certainty(rng):
    p = init_params("cut", seed=3, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=1), p)
    (logp,) = fwd.pointer_log_probs([0])
    assert float(torch.exp(logp[0])) == 1.0
    act = sample_cut_action(fwd, np.random.default_rng(0))
    assert act.selected == (0,)


def test_pointer_masks_selected_indices(rng):
    p = init_params("cut", seed=4, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=6), p)
    order = [4, 1, 5, 0, 2, 3]
    for step, logp in enumerate(fwd.pointer_log_probs(order)):
        probs = torch.exp(logp)
        assert all(float(probs[j]) == 0.0 for j in order[:step])
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-9)


def _squashed_gaussian_logpdf(z, mu, sd):
    # k = (tanh z + 1) / 2, so dk/dz = (1 - tanh^2 z) / 2
    return stats.norm.logpdf(z, mu, sd) - math.log((1 - math.tanh(z) ** 2) / 2)


def test_sampled_log_prob_matches_recomputation(rng):
    p = init_params("cut", seed=5, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=5), p)
    draw = np.random.default_rng(9)
    mu, sd = float(fwd.ratio_mean), float(fwd.ratio_std)
    for _ in range(20):
        act = sample_cut_action(fwd, draw)
        assert len(act.selected) == math.ceil(act.ratio_k * 5) == len(set(act.selected))
        steps = fwd.pointer_log_probs(list(act.selected))
        want = _squashed_gaussian_logpdf(act.ratio_z, mu, sd) + sum(
            float(lp[j]) for lp, j in zip(steps, act.selected))
        assert act.log_prob == pytest.approx(want, abs=1e-9)
        assert float(fwd.log_prob(act)) == pytest.approx(want, abs=1e-9)


def test_cut_pool_permutation_permutes_probabilities(rng):
    p = init_params("cut", seed=6, d_h=D)
    cs = random_cut_state(rng, pool=6)
    perm = rng.permutation(6)
    shuffled = CutState(cs.cut_features[perm], cs.graph)
    a, b = cut_policy_forward(cs, p), cut_policy_forward(shuffled, p)
    assert float(a.ratio_mean) == pytest.approx(float(b.ratio_mean), abs=1e-12)
    first = [int(i) for i in np.argsort(perm)[[2, 0]]]  # original indices 2, 0 in the shuffled pool
    pa = [torch.exp(lp) for lp in a.pointer_log_probs([2, 0, 1])]
    pb = [torch.exp(lp) for lp in b.pointer_log_probs(first + [int(np.argsort(perm)[1])])]
    for x, y in zip(pa, pb):
        assert torch.allclose(x[perm], y, atol=1e-12)


def test_full_exploration_is_uniform_over_subsets(rng):
    p = init_params("cut", seed=7, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=4), p)
    draw = np.random.default_rng(0)
    subsets = Counter()
    sizes = Counter()
    for _ in range(10_000):
        act = sample_cut_action(fwd, draw, epsilon=1.0)
        assert act.source == "explore"
        sizes[len(act.selected)] += 1
        subsets[frozenset(act.selected)] += 1
    # k ~ U[0,1] makes ceil(4k) uniform on 1..4
    assert stats.chisquare([sizes[c] for c in range(1, 5)]).pvalue > 1e-3
    for c in range(1, 5):
        counts = [subsets[frozenset(s)] for s in itertools.combinations(range(4), c)]
        if len(counts) > 1:
            assert stats.chisquare(counts).pvalue > 1e-3


def test_exploration_log_prob_is_under_the_policy(rng):
    p = init_params("cut", seed=8, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=4), p)
    act = sample_cut_action(fwd, np.random.default_rng(1), epsilon=1.0)
    assert act.log_prob == pytest.approx(float(fwd.log_prob(act)), abs=1e-12)


def test_sampling_is_repeatable(rng):
    p = init_params("cut", seed=9, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=6), p)
    greedy = [sample_cut_action(fwd, np.random.default_rng(s), deterministic=True) for s in range(3)]
    assert len({(a.ratio_k, a.selected) for a in greedy}) == 1
    a = sample_cut_action(fwd, np.random.default_rng(5), epsilon=0.3)
    b = sample_cut_action(fwd, np.random.default_rng(5), epsilon=0.3)
    assert a == b


def test_empty_pool_gives_empty_action(rng):
    p = init_params("cut", seed=10, d_h=D)
    fwd = cut_policy_forward(CutState(np.zeros((0, 13)), random_graph(rng)), p)
    act = sample_cut_action(fwd, np.random.default_rng(0), epsilon=0.5)
    assert act.selected == () and act.log_prob == 0.0
    assert selection_probability(fwd, 0) == 0.0


def test_selection_probability_against_monte_carlo(rng):
    p = init_params("cut", seed=11, d_h=D)
    fwd = cut_policy_forward(random_cut_state(rng, pool=3), p)
    exact = [selection_probability(fwd, i) for i in range(3)]
    draw = np.random.default_rng(2)
    n = 4000
    hits = Counter()
    for _ in range(n):
        for i in sample_cut_action(fwd, draw).selected:
            hits[i] += 1
    for i in range(3):
        sigma = math.sqrt(exact[i] * (1 - exact[i]) / n)
        assert abs(hits[i] / n - exact[i]) <= 4 * sigma + 1e-3
    with pytest.raises(ValueError):
        selection_probability(cut_policy_forward(random_cut_state(rng, pool=9), p), 0)


# ---------------------------------------------------------------------------
# branching policy


def test_branch_distribution(rng):
    p = init_params("branch", seed=12, d_h=D)
    g = random_graph(rng)
    lp = branch_policy_forward(g, [1, 4, 5, 7], p)
    assert float(torch.exp(lp).sum()) == pytest.approx(1.0, abs=1e-9)
    assert float(torch.exp(branch_policy_forward(g, [3], p))[0]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        branch_policy_forward(g, [], p)


def test_branch_gradients(rng):
    p = init_params("branch", seed=13, d_h=D)
    g = random_graph(rng)
    fd_check(p, lambda: nll_loss(branch_policy_forward(g, [1, 4, 5, 7], p), 2), rng)


def test_batched_forward_matches_single(rng):
    p = init_params("branch", seed=14, d_h=D)
    graphs = [random_graph(rng, m, n) for m, n in ((4, 6), (7, 9), (3, 5))]
    cands = [[0, 2, 5], [8, 1], [4, 3, 2, 0]]
    batch = branch_policy_forward_batch(graphs, cands, p)
    for b, (g, c) in enumerate(zip(graphs, cands)):
        single = branch_policy_forward(g, c, p)
        assert torch.allclose(batch[b, :len(c)], single, atol=1e-12)
        assert torch.all(torch.isinf(batch[b, len(c):]))


def test_branch_sampling(rng):
    p = init_params("branch", seed=15, d_h=D)
    lp = branch_policy_forward(random_graph(rng), [1, 4, 5, 7], p)
    greedy = sample_branch_action(lp, [1, 4, 5, 7], np.random.default_rng(0), deterministic=True)
    assert greedy.var == [1, 4, 5, 7][int(torch.argmax(lp))]
    a = sample_branch_action(lp, [1, 4, 5, 7], np.random.default_rng(3), epsilon=0.5)
    b = sample_branch_action(lp, [1, 4, 5, 7], np.random.default_rng(3), epsilon=0.5)
    assert a == b and a.var in (1, 4, 5, 7)


def test_nll_of_uniform_is_log_four():
    lp = torch.log(torch.full((4,), 0.25, dtype=torch.float64))
    for j in range(4):
        assert float(nll_loss(lp, j)) == pytest.approx(math.log(4), abs=1e-15)


# ---------------------------------------------------------------------------
# optimizer and parameter files


def test_adam_zero_gradients_are_a_no_op():
    p = init_params("branch", seed=16, d_h=D)
    before = p.clone()
    opt = Adam(p, lr=0.1)
    opt.step({k: torch.zeros_like(v) for k, v in p.tensors.items()})
    assert p.equal(before)


def test_adam_decreases_a_quadratic():
    p = init_params("branch", seed=17, d_h=D)
    opt = Adam(p, lr=1e-2)
    loss = lambda: sum(float((t ** 2).sum()) for t in p.tensors.values())  # noqa: E731
    start = loss()
    for _ in range(5):
        opt.step({k: 2 * v for k, v in p.tensors.items()})
        assert loss() < start
        start = loss()


def test_adam_state_round_trip():
    p = init_params("branch", seed=18, d_h=D)
    opt = Adam(p, lr=1e-2)
    opt.step({k: torch.ones_like(v) for k, v in p.tensors.items()})
    other = Adam(p.clone(), lr=0.5)
    other.load_bytes(opt.to_bytes())
    assert other.step_count == 1 and other.lr == opt.lr
    assert all(torch.equal(other.m[k], opt.m[k]) and torch.equal(other.v[k], opt.v[k]) for k in opt.m)


def test_clip_grad_norm():
    p = init_params("branch", seed=19, d_h=D)
    for t in p.tensors.values():
        t.grad = torch.ones_like(t)
    total = clip_grad_norm(p, 1.0)
    assert total == pytest.approx(math.sqrt(sum(t.numel() for t in p.tensors.values())))
    clipped = math.sqrt(sum(float((t.grad ** 2).sum()) for t in p.tensors.values()))
    assert clipped == pytest.approx(1.0, rel=1e-9)


def test_param_file_round_trip(tmp_path):
    for kind in ("cut", "branch"):
        p = init_params(kind, seed=20, d_h=D)
        save_params(p, tmp_path / f"{kind}.params")
        back = load_params(tmp_path / f"{kind}.params")
        assert back.equal(p) and back.arch == p.arch and back.seed == 20


def test_param_file_errors():
    blob = params_to_bytes(init_params("branch", seed=21, d_h=D))
    with pytest.raises(ParamFormatError, match="magic"):
        params_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ParamVersionError):
        params_from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(ParamFormatError):
        params_from_bytes(blob[:-5])
