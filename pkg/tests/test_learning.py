import csv
import math

import numpy as np
import pytest
import torch

from collab_milp.bnc import INFEASIBLE_DELTA, SolveLimits, solve
from collab_milp.instances import gen_rigged_cut, gen_set_covering
from collab_milp.learning import (
    LOG_COLUMNS,
    ConfigError,
    EmaBaseline,
    ExpertMixBranching,
    ExpertSample,
    PhaseOrderError,
    TrainConfig,
    TrainingLog,
    collect_expert,
    discount_weights,
    evaluate,
    finetune,
    make_selectors,
    pretrain_cut,
    reward,
    stepped_lr,
    summarize,
    train_bc,
)
from collab_milp.milp import MilpInstance
from collab_milp.policy import branch_policy_forward, init_params, nll_loss

from conftest import scipy_lp, small_knapsack

D = 16


def cfg(**kw):
    base = dict(d_h=D, n_jobs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base).validate()


def knapsacks(k=4, start=0):
    return [small_knapsack(s, n=8, m=3, top=3) for s in range(start, start + k)]


# ---------------------------------------------------------------------------
# rewards, baseline, returns, schedule arithmetic


def test_reward_signs():
    assert reward({"virtual_clock": 2.5, "pd_gap": 0.3}) == -2.5
    assert reward({"virtual_clock": 2.5, "pd_gap": 0.0}, "pd_gap") == 0.0
    with pytest.raises(ConfigError):
        reward({"virtual_clock": 1.0}, "wall")


def test_reward_of_a_recorded_solve():
    res = solve(gen_set_covering(30, 20, 0.15, seed=2))
    assert reward(res) == -res.virtual_seconds
    assert reward(res) == pytest.approx(-1e-5 * res.lp_iterations_total, rel=1e-12)
    assert reward(res, "pd_gap") == 0.0


def test_ema_baseline():
    b = EmaBaseline(0.9, 0.0)
    b.update(-1.0)
    assert b.update(-2.0) == pytest.approx(-0.29, abs=1e-15)
    lazy = EmaBaseline(0.9)
    assert lazy.advantage(-3.0) == 0.0
    assert lazy.update(-3.0) == -3.0
    assert lazy.advantage(-1.0) == 2.0


def test_discount_weights():
    assert discount_weights(3, 0.5) == [0.25, 0.5, 1.0]
    assert discount_weights(3, 0.5, discount=False) == [1.0, 1.0, 1.0]
    assert discount_weights(0, 0.9) == []


def test_stepped_lr():
    c = TrainConfig()
    assert [stepped_lr(1.0, e, c) for e in (1, 5, 6, 11)] == [1.0, 1.0, 0.96, 0.96 ** 2]


def test_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError, match="p_s"):
        TrainConfig(p_s=0.0).validate()
    with pytest.raises(ConfigError, match="omega_b"):
        TrainConfig(omega_b=4, omega_c=4).validate()
    with pytest.raises(ConfigError, match="reward_mode"):
        TrainConfig(reward_mode="wall").validate()
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"N_c": 3, "bogus": 1})
    assert TrainConfig.from_dict({"N_c": 3}).N_c == 3


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.N_c, c.N_b, c.N, c.p_s, c.N_f) == (100, 100, 5000, 0.1, 35)
    assert (c.lr_low, c.lr_high, c.lr_bc, c.lr_ft) == (1e-4, 5e-4, 1e-3, 1e-5)
    assert (c.omega_c, c.omega_b, c.gamma, c.beta_critic, c.epsilon, c.grad_clip) == \
        (4, 1, 0.99, 0.9, 0.05, 2.0)


# ---------------------------------------------------------------------------
# cut pretraining


def test_pretrain_is_deterministic_and_moves_parameters():
    train = [gen_rigged_cut(211)]
    # a zero start makes the first advantage nonzero even on a single instance
    c = cfg(N_c=3, baseline_init=0.0)
    a, rep = pretrain_cut(train, c, SolveLimits(cut_depth_limit=0))
    b, _ = pretrain_cut(train, c, SolveLimits(cut_depth_limit=0))
    assert a.equal(b)
    assert rep.epochs == 3 and len(rep.rewards) == 3
    assert not a.equal(init_params("cut", 0, D))


def test_pretrain_skips_instances_without_cuts():
    trivial = MilpInstance([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], ["G", "G"], [1.0, 2.0],
                           integrality=[0, 1], ub=[5.0, 5.0])
    theta, rep = pretrain_cut([trivial], cfg(N_c=2))
    assert rep.skipped == 2 and rep.updates == 0
    assert theta.equal(init_params("cut", 0, D))


def test_pretrain_resume_is_bitwise(tmp_path):
    train = [gen_rigged_cut(211), gen_rigged_cut(24)]
    lim = SolveLimits(cut_depth_limit=0)
    straight, _ = pretrain_cut(train, cfg(N_c=4), lim)
    pretrain_cut(train, cfg(N_c=2), lim, checkpoint_dir=tmp_path)
    resumed, rep = pretrain_cut(train, cfg(N_c=4), lim, checkpoint_dir=tmp_path)
    assert rep.resumed_from == 2
    assert resumed.equal(straight)


def test_training_log(tmp_path):
    path = tmp_path / "log.csv"
    log = TrainingLog(path, seed=3, config_hash="abc")
    pretrain_cut([gen_rigged_cut(211)], cfg(N_c=3), SolveLimits(cut_depth_limit=0), training_log=log)
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc seed=3"
    rows = list(csv.reader(lines[1:]))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    log.truncate("pretrain_cut", 1)
    assert len(path.read_text().splitlines()) == 3


# ---------------------------------------------------------------------------
# expert collection


def _independent_scores(problem, node, x, candidates, objective):
    out = []
    for j in candidates:
        deltas = []
        for side in (0, 1):
            lb, ub = node.lb.copy(), node.ub.copy()
            if side == 0:
                ub[j] = math.floor(x[j])
            else:
                lb[j] = math.ceil(x[j])
            ref = scipy_lp(problem, lb, ub)
            deltas.append(INFEASIBLE_DELTA if ref.status == 2 else max(ref.fun - objective, 0.0))
        out.append(max(deltas[0], 1e-6) * max(deltas[1], 1e-6))
    return np.array(out)


def test_expert_choice_matches_independent_strong_branching():
    checked = 0

    class Recheck(ExpertMixBranching):
        def select_branch(self, ctx):
            nonlocal checked
            action = super().select_branch(ctx)
            ref = _independent_scores(ctx.problem, ctx.node, ctx.sol.x, ctx.candidates,
                                      ctx.sol.objective)
            assert self.samples[-1].chosen == action.var
            # the pick is an argmax of the recomputed scores up to LP tolerance
            assert ref[ctx.candidates.index(action.var)] >= ref.max() * (1 - 1e-6) - 1e-9
            checked += 1
            return action

    seed = 0
    while checked < 100:
        solve(small_knapsack(seed, n=8, m=3, top=3), None, Recheck(1.0), rng_seed=seed)
        seed += 1
    assert checked >= 100


def test_every_branching_recorded_with_full_probability():
    for s in range(4):
        brancher = ExpertMixBranching(1.0)
        res = solve(small_knapsack(s, n=8, m=3), None, brancher, rng_seed=s)
        assert len(brancher.samples) == len(res.trajectory.branch_decisions) > 0
        assert all(d.action.source == "strong" for d in res.trajectory.branch_decisions)


def test_collect_expert():
    c = cfg(N=30, p_s=1.0)
    data = collect_expert(knapsacks(), None, c)
    assert len(data) == 30
    assert all(s.chosen in s.candidates for s in data)
    again = collect_expert(knapsacks(), None, c)
    assert [(s.candidates, s.chosen) for s in again] == [(s.candidates, s.chosen) for s in data]
    with pytest.raises(ValueError):
        ExpertSample(data[0].state, (1, 2), 3)


def test_collect_expert_gives_up():
    trivial = MilpInstance([1.0], [[1.0]], ["G"], [1.0], integrality=[0], ub=[2.0])
    with pytest.raises(RuntimeError, match="expert collection"):
        collect_expert([trivial], None, cfg(N=5, p_s=1.0, max_expert_solves=3))


# ---------------------------------------------------------------------------
# behavioral cloning


@pytest.fixture(scope="module")
def expert_data():
    return collect_expert(knapsacks(6), None, cfg(N=60, p_s=1.0))


def test_bc_loss_is_mean_nll(expert_data):
    psi, rep = train_bc(expert_data, cfg(N_b=2))
    with torch.no_grad():
        direct = np.mean([float(nll_loss(branch_policy_forward(s.state, s.candidates, psi), s.chosen_pos))
                          for s in expert_data])
    assert abs(rep.final_loss - direct) <= 1e-12


def test_bc_initial_loss_near_log_candidates(expert_data):
    _, rep = train_bc(expert_data, cfg(N_b=1))
    expect = math.log(np.mean([len(s.candidates) for s in expert_data]))
    assert abs(rep.initial_loss - expect) <= 0.2 * expect


def test_bc_memorizes_one_sample(expert_data):
    sample = max(expert_data, key=lambda s: len(s.candidates))
    _, rep = train_bc([sample], cfg(N_b=60, lr_bc=1e-2))
    assert rep.n_val == 0
    assert rep.final_loss < 0.01


def test_bc_report_and_resume(expert_data, tmp_path):
    straight, rep = train_bc(expert_data, cfg(N_b=3))
    assert len(rep.train_loss) == len(rep.val_accuracy) == 3
    assert rep.n_train + rep.n_val == len(expert_data) and rep.n_val == 6
    train_bc(expert_data, cfg(N_b=1), checkpoint_dir=tmp_path)
    resumed, rep2 = train_bc(expert_data, cfg(N_b=3), checkpoint_dir=tmp_path)
    assert rep2.resumed_from == 1
    assert resumed.equal(straight)
    assert rep2.val_accuracy == rep.val_accuracy


# ---------------------------------------------------------------------------
# finetuning


@pytest.fixture(scope="module")
def policies():
    return init_params("cut", 1, D), init_params("branch", 2, D)


def test_two_timescale_schedule(policies):
    theta, psi = policies
    _, _, rep = finetune(knapsacks(), theta, psi, cfg(N_f=35))
    assert rep.theta_updates == 8 and rep.psi_updates == 35
    assert rep.theta_schedule == [4, 8, 12, 16, 20, 24, 28, 32]
    gaps = [sum(1 for e in rep.psi_schedule if a < e <= b)
            for a, b in zip(rep.theta_schedule, rep.theta_schedule[1:])]
    assert all(g >= 4 for g in gaps)


def test_zero_learning_rate_changes_nothing(policies):
    theta, psi = policies
    c = cfg(N_f=6, epsilon=0.0, lr_ft=0.0)
    t2, p2, _ = finetune(knapsacks(), theta, psi, c)
    assert t2.equal(theta) and p2.equal(psi)
    before, _ = evaluate(knapsacks(), theta, psi)
    after, _ = evaluate(knapsacks(), t2, p2)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_s"} for r in rows]  # noqa: E731
    assert strip(before) == strip(after)


def test_finetune_resume_is_bitwise(policies, tmp_path):
    theta, psi = policies
    a_t, a_p, a_rep = finetune(knapsacks(), theta, psi, cfg(N_f=6, omega_c=3))
    finetune(knapsacks(), theta, psi, cfg(N_f=4, omega_c=3), checkpoint_dir=tmp_path)
    b_t, b_p, b_rep = finetune(knapsacks(), theta, psi, cfg(N_f=6, omega_c=3), checkpoint_dir=tmp_path)
    assert b_rep.resumed_from == 4
    assert a_t.equal(b_t) and a_p.equal(b_p)
    assert a_rep.theta_schedule == b_rep.theta_schedule == [3, 6]


def test_finetune_needs_both_policies(policies):
    with pytest.raises(PhaseOrderError):
        finetune(knapsacks(), policies[0], None, cfg(N_f=2))


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_rows_and_means():
    insts = [MilpInstance([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], ["G", "G"], [1.0, 2.0],
                          integrality=[0, 1], ub=[5.0, 5.0], name="root")] + knapsacks(3)
    rows, summary = evaluate(insts, None, None, combos=(("heuristic", "heuristic"), ("none", "random")),
                             seeds=(0, 1))
    assert len(rows) == 2 * 2 * 4
    assert [r["nodes"] for r in rows if r["instance"] == "root"] == [1] * 4
    for combo in ("heuristic+heuristic", "none+random"):
        sub = [r for r in rows if r["policy_combo"] == combo]
        for m in ("virtual_s", "nodes", "pd_integral"):
            assert summary[combo][m]["mean"] == pytest.approx(sum(r[m] for r in sub) / len(sub), rel=1e-12)
    again, _ = evaluate(insts, None, None, combos=(("heuristic", "heuristic"), ("none", "random")),
                        seeds=(0, 1))
    assert [r["virtual_s"] for r in again] == [r["virtual_s"] for r in rows]
    assert all(r["pd_integral"] >= 0 for r in rows)


def test_summary_std_across_seeds():
    rows = [{"policy_combo": "x", "seed": s, "wall_s": 0, "virtual_s": v, "pd_integral": 0, "pd_gap": 0,
             "nodes": 1, "lp_iters": 1} for s, v in ((0, 1.0), (0, 3.0), (1, 5.0), (1, 7.0))]
    out = summarize(rows)["x"]["virtual_s"]
    assert out["mean"] == 4.0 and out["std"] == 2.0


def test_selector_choices():
    with pytest.raises(PhaseOrderError):
        make_selectors("learned", "heuristic")
    with pytest.raises(ConfigError):
        make_selectors("bogus", "heuristic")
    cut, br = make_selectors("none", "strong_branching")
    assert cut is None and br.name
