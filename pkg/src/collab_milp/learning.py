"""Two-phase training: cut-policy REINFORCE, expert collection, behavioral
cloning, concurrent two-timescale finetuning, and evaluation.

One epoch is one instance solve. Every phase draws its randomness from a
generator seeded by (seed, phase), and can checkpoint and resume bitwise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing as mp
import os
import pickle
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .bnc import (
    AllCutsSelector,
    HeuristicCutSelector,
    MostFractionalBranching,
    RandomBranching,
    SolveLimits,
    StrongBranching,
    most_fractional_of,
    pd_integral,
    solve,
)
from .features import BipartiteState
from .milp import MilpInstance
from .policy import (
    Adam,
    LearnedBranchSelector,
    LearnedCutSelector,
    ParamSet,
    branch_policy_forward_batch,
    clip_grad_norm,
    cut_policy_forward,
    init_params,
    load_params,
    save_params,
)
from .records import BranchAction

log = logging.getLogger(__name__)

THREADS_ENV = "COLLAB_MILP_THREADS"
REWARD_MODES = ("virtual_time", "pd_gap")

# stream tags keep the phases' random streams apart
_PRETRAIN, _COLLECT, _BC, _FINETUNE = 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class PhaseOrderError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    N_c: int = 100
    N_b: int = 100
    N: int = 5000
    p_s: float = 0.1
    N_f: int = 35
    lr_low: float = 1e-4
    lr_high: float = 5e-4
    lr_bc: float = 1e-3
    lr_ft: float = 1e-5
    batch_rl: int = 16
    batch_bc: int = 32
    beta_critic: float = 0.9
    gamma: float = 0.99
    epsilon: float = 0.05
    omega_c: int = 4
    omega_b: int = 1
    lr_decay_step: int = 5
    lr_decay_rate: float = 0.96
    grad_clip: float = 2.0
    n_jobs: int = 2
    reward_mode: str = "virtual_time"
    seed: int = 0
    # None starts the reward baseline at the first observed reward
    baseline_init: float | None = None
    # False gives every decision the undiscounted terminal reward
    discount_returns: bool = True
    d_h: int = 128
    val_fraction: float = 0.1
    # cap on solves during expert collection; None means 50 * N
    max_expert_solves: int | None = None
    keep_checkpoints: int = 2

    def validate(self) -> "TrainConfig":
        for name in ("N_c", "N_b", "N", "N_f", "omega_c", "omega_b", "batch_rl", "batch_bc",
                     "lr_decay_step", "n_jobs", "d_h", "keep_checkpoints"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.omega_b < self.omega_c:
            raise ConfigError("omega_b must be smaller than omega_c")
        if not 0.0 < self.p_s <= 1.0:
            raise ConfigError("p_s must lie in (0, 1]; p_s = 0 never yields expert samples")
        for name in ("lr_low", "lr_high", "lr_bc", "lr_ft"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0.0 <= self.beta_critic < 1.0:
            raise ConfigError("beta_critic must lie in [0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 < self.lr_decay_rate <= 1.0:
            raise ConfigError("lr_decay_rate must lie in (0, 1]")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# rewards, baseline, returns


def reward(summary, mode: str = "virtual_time") -> float:
    """Terminal reward of a solve: minus its virtual time or minus its final PD gap."""
    if not isinstance(summary, dict):
        summary = summary.trajectory.terminal
    if mode == "virtual_time":
        return -float(summary["virtual_clock"])
    if mode == "pd_gap":
        return -float(summary["pd_gap"])
    raise ConfigError(f"unknown reward mode {mode!r}")


@dataclass
class EmaBaseline:
    """b <- beta * b + (1 - beta) * R; starts at the first reward when ``value`` is None."""

    beta: float = 0.9
    value: float | None = None

    def advantage(self, r: float) -> float:
        return 0.0 if self.value is None else r - self.value

    def update(self, r: float) -> float:
        self.value = r if self.value is None else self.beta * self.value + (1.0 - self.beta) * r
        return self.value


def discount_weights(n: int, gamma: float, discount: bool = True) -> list[float]:
    """gamma ** (number of later decisions of the same agent), per decision."""
    if not discount:
        return [1.0] * n
    return [gamma ** (n - 1 - i) for i in range(n)]


def stepped_lr(base: float, epoch: int, cfg: TrainConfig) -> float:
    """Learning rate of 1-based ``epoch`` under the stepped decay."""
    return base * cfg.lr_decay_rate ** ((epoch - 1) // cfg.lr_decay_step)


def cut_lr_map(params: ParamSet, low: float, high: float) -> dict:
    high_names = set(params.high_level_names())
    return {k: (high if k in high_names else low) for k in params.names()}


def _cut_log_prob(params: ParamSet, item) -> torch.Tensor:
    state, action = item
    return cut_policy_forward(state, params).log_prob(action)


def _branch_log_probs(params: ParamSet, items) -> torch.Tensor:
    states = [s for s, _, _ in items]
    cands = [c for _, c, _ in items]
    pos = torch.as_tensor([c.index(v) for _, c, v in items])
    logp = branch_policy_forward_batch(states, cands, params)
    return logp[torch.arange(len(items)), pos]


def reinforce_update(params: ParamSet, opt: Adam, items: list, advantages: list[float],
                     batch: int, clip: float, kind: str) -> tuple[int, float]:
    """Policy-gradient steps over ``items`` in order, ``batch`` decisions per step.

    The surrogate loss is -mean(advantage * log pi(action | state)). Batches
    whose advantages are all zero carry no gradient and are skipped.
    Returns (optimizer steps, mean surrogate loss).
    """
    steps, total, count = 0, 0.0, 0
    params.requires_grad_(True)
    try:
        for start in range(0, len(items), batch):
            chunk = items[start:start + batch]
            adv = torch.as_tensor(advantages[start:start + batch], dtype=torch.float64)
            if not torch.any(adv != 0):
                continue
            params.zero_grad()
            if kind == "cut":
                logp = torch.stack([_cut_log_prob(params, it) for it in chunk])
            else:
                logp = _branch_log_probs(params, chunk)
            loss = -(adv * logp).mean()
            loss.backward()
            clip_grad_norm(params, clip)
            opt.step()
            steps += 1
            total += float(loss.detach()) * len(chunk)
            count += len(chunk)
    finally:
        params.zero_grad()
        params.requires_grad_(False)
    return steps, (total / count if count else 0.0)


# ---------------------------------------------------------------------------
# checkpoints and training logs


LOG_COLUMNS = ("epoch", "phase", "loss_or_reward", "baseline", "lr", "seed")


class TrainingLog:
    """Training-curve CSV; rows past a resume point are dropped before appending."""

    def __init__(self, path, seed: int, config_hash: str = ""):
        self.path = Path(path)
        self.seed = seed
        self.config_hash = config_hash

    def truncate(self, phase: str, after_epoch: int) -> None:
        if not self.path.exists():
            return
        with self.path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [r for r in rows if not (r and r[0] != "epoch" and not r[0].startswith("#")
                                       and r[1] == phase and int(r[0]) > after_epoch)]
        if len(keep) != len(rows):
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerows(keep)

    def write(self, epoch: int, phase: str, value: float, baseline, lr: float) -> None:
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                if self.config_hash:
                    fh.write(f"# config_hash={self.config_hash} seed={self.seed}\n")
                w.writerow(LOG_COLUMNS)
            w.writerow([epoch, phase, repr(float(value)),
                        "" if baseline is None else repr(float(baseline)), repr(float(lr)),
                        self.seed])


class Checkpointer:
    """Files ``<phase>-<epoch>.params`` (one per role), optimizer ``.adam`` files
    and a ``.state.json`` written last that marks the checkpoint complete."""

    def __init__(self, directory, phase: str, keep: int = 2):
        self.dir = Path(directory)
        self.phase = phase
        self.keep = keep

    def _stem(self, role: str, epoch: int) -> str:
        return f"{self.phase}-{epoch}" if role == "" else f"{self.phase}_{role}-{epoch}"

    def params_path(self, role: str, epoch: int) -> Path:
        return self.dir / (self._stem(role, epoch) + ".params")

    def _meta_path(self, epoch: int) -> Path:
        return self.dir / f"{self.phase}-{epoch}.state.json"

    def epochs(self) -> list[int]:
        pat = re.compile(re.escape(self.phase) + r"-(\d+)\.state\.json$")
        if not self.dir.exists():
            return []
        return sorted(int(m.group(1)) for p in self.dir.iterdir() if (m := pat.match(p.name)))

    def latest(self) -> int | None:
        e = self.epochs()
        return e[-1] if e else None

    def save(self, epoch: int, params: dict, opts: dict, meta: dict) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for role, p in params.items():
            save_params(p, self.params_path(role, epoch))
        for role, opt in opts.items():
            opt.save(self.dir / (self._stem(role, epoch) + ".adam"))
        path = self._meta_path(epoch)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(meta, sort_keys=True))
        tmp.replace(path)
        for old in self.epochs()[:-self.keep]:
            self._remove(old, list(params))

    def _remove(self, epoch: int, roles: list[str]) -> None:
        self._meta_path(epoch).unlink(missing_ok=True)
        for role in roles:
            self.params_path(role, epoch).unlink(missing_ok=True)
            (self.dir / (self._stem(role, epoch) + ".adam")).unlink(missing_ok=True)

    def load(self, epoch: int, roles: list[str]) -> tuple[dict, dict]:
        meta = json.loads(self._meta_path(epoch).read_text())
        params = {r: load_params(self.params_path(r, epoch)) for r in roles}
        return params, meta

    def load_opt(self, opt: Adam, role: str, epoch: int) -> None:
        opt.load(self.dir / (self._stem(role, epoch) + ".adam"))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# phase 1a: cut policy pretraining


@dataclass
class PhaseReport:
    epochs: int = 0
    updates: int = 0
    optimizer_steps: int = 0
    skipped: int = 0
    rewards: list = field(default_factory=list)
    resumed_from: int | None = None


def pretrain_cut(train_set: list[MilpInstance], cfg: TrainConfig,
                 limits: SolveLimits | None = None, theta: ParamSet | None = None,
                 checkpoint_dir=None, training_log: TrainingLog | None = None,
                 on_epoch=None) -> tuple[ParamSet, PhaseReport]:
    """REINFORCE on the cut policy with most-fractional branching held fixed."""
    cfg.validate()
    if not train_set:
        raise ValueError("empty training set")
    limits = limits or SolveLimits()
    rng = np.random.default_rng([cfg.seed, _PRETRAIN])
    theta = (theta.clone() if theta is not None else init_params("cut", cfg.seed, cfg.d_h))
    opt = Adam(theta, cut_lr_map(theta, cfg.lr_low, cfg.lr_high))
    baseline = EmaBaseline(cfg.beta_critic, cfg.baseline_init)
    report = PhaseReport()
    ckpt = Checkpointer(checkpoint_dir, "pretrain_cut", cfg.keep_checkpoints) if checkpoint_dir else None
    start = 1
    if ckpt is not None and (last := ckpt.latest()) is not None:
        params, meta = ckpt.load(last, [""])
        theta = params[""]
        opt = Adam(theta, cut_lr_map(theta, cfg.lr_low, cfg.lr_high))
        ckpt.load_opt(opt, "", last)
        baseline.value = meta["baseline"]
        _set_rng_state(rng, meta["rng"])
        report.updates = meta["updates"]
        report.resumed_from = last
        start = last + 1
    if training_log is not None:
        training_log.truncate("pretrain_cut", start - 1)

    for epoch in range(start, cfg.N_c + 1):
        lr_low, lr_high = stepped_lr(cfg.lr_low, epoch, cfg), stepped_lr(cfg.lr_high, epoch, cfg)
        opt.set_lr(cut_lr_map(theta, lr_low, lr_high))
        inst = train_set[int(rng.integers(len(train_set)))]
        solve_seed = int(rng.integers(2 ** 31))
        result = solve(inst, LearnedCutSelector(theta, cfg.epsilon, deterministic=False),
                       MostFractionalBranching(), limits, rng_seed=solve_seed)
        r = reward(result, cfg.reward_mode)
        adv = baseline.advantage(r)
        baseline.update(r)
        report.rewards.append(r)
        decisions = [d for d in result.trajectory.cut_decisions if d.state is not None]
        if not decisions:
            log.info("pretrain_cut epoch %d: %s produced no cut decisions, skipped", epoch, inst.name)
            report.skipped += 1
        else:
            w = discount_weights(len(decisions), cfg.gamma, cfg.discount_returns)
            items = [(d.state, d.action) for d in decisions]
            steps, _ = reinforce_update(theta, opt, items, [wi * adv for wi in w],
                                        cfg.batch_rl, cfg.grad_clip, "cut")
            report.optimizer_steps += steps
            report.updates += 1
        report.epochs = epoch
        if training_log is not None:
            training_log.write(epoch, "pretrain_cut", r, baseline.value, lr_high)
        if ckpt is not None:
            ckpt.save(epoch, {"": theta}, {"": opt},
                      {"epoch": epoch, "baseline": baseline.value, "rng": _rng_state(rng),
                       "updates": report.updates})
        if on_epoch is not None:
            on_epoch(epoch, theta)
    return theta, report


# ---------------------------------------------------------------------------
# phase 1b: expert collection


@dataclass(eq=False)
class ExpertSample:
    state: BipartiteState
    candidates: tuple[int, ...]
    chosen: int  # variable index, the strong-branching argmax
    scores: np.ndarray | None = None

    def __post_init__(self):
        if self.chosen not in self.candidates:
            raise ValueError("expert choice must be a candidate")

    @property
    def chosen_pos(self) -> int:
        return self.candidates.index(self.chosen)


class ExpertMixBranching:
    """Strong branching with probability p_s (recorded), most-fractional otherwise."""

    name = "expert_mix"

    def __init__(self, p_s: float):
        self.p_s = p_s
        self.samples: list[ExpertSample] = []

    def select_branch(self, ctx) -> BranchAction:
        if ctx.rng.random() < self.p_s:
            scores = ctx.strong_branching_scores()
            var = ctx.candidates[int(np.argmax(scores))]
            self.samples.append(ExpertSample(ctx.state(), ctx.candidates, var, np.array(scores)))
            return BranchAction(var, source="strong")
        return BranchAction(most_fractional_of(ctx.sol.x, ctx.candidates), source="heuristic")


def _expert_solve(args) -> list[ExpertSample]:
    inst, theta, p_s, limits, solve_seed = args
    cut = LearnedCutSelector(theta, 0.0, deterministic=True) if theta is not None \
        else HeuristicCutSelector()
    brancher = ExpertMixBranching(p_s)
    solve(inst, cut, brancher, limits, rng_seed=solve_seed, record=False)
    return brancher.samples


def effective_jobs(n_jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n_jobs = min(n_jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    return max(1, n_jobs)


def _parallel_map(fn, items: list, n_jobs: int) -> list:
    n_jobs = effective_jobs(n_jobs)
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(n_jobs, len(items)),
                             mp_context=mp.get_context("spawn")) as ex:
        return list(ex.map(fn, items))


def collect_expert(train_set: list[MilpInstance], theta: ParamSet | None, cfg: TrainConfig,
                   limits: SolveLimits | None = None) -> list[ExpertSample]:
    """Strong-branching samples gathered while ``theta`` selects cuts.

    ``theta=None`` collects under the heuristic cut selector. Solve i draws
    its instance and seed from a stream keyed by i, so the dataset does not
    depend on ``n_jobs``.
    """
    cfg.validate()
    if not train_set:
        raise ValueError("empty training set")
    limits = limits or SolveLimits()
    cap = cfg.max_expert_solves if cfg.max_expert_solves is not None else 50 * cfg.N
    jobs = effective_jobs(cfg.n_jobs)
    samples: list[ExpertSample] = []
    i = 0
    while len(samples) < cfg.N:
        if i >= cap:
            raise RuntimeError(f"expert collection stopped after {cap} solves with "
                               f"{len(samples)} of {cfg.N} samples")
        wave = []
        for j in range(i, min(i + jobs, cap)):
            r = np.random.default_rng([cfg.seed, _COLLECT, j])
            wave.append((train_set[int(r.integers(len(train_set)))], theta, cfg.p_s, limits,
                         int(r.integers(2 ** 31))))
        for got in _parallel_map(_expert_solve, wave, jobs):
            i += 1
            samples.extend(got)
            if len(samples) >= cfg.N:
                break
    return samples[:cfg.N]


# ---------------------------------------------------------------------------
# phase 1c: behavioral cloning


@dataclass
class BcReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    uniform_baseline: float = float("nan")
    initial_loss: float = float("nan")
    # mean NLL over the whole dataset under the returned parameters
    final_loss: float = float("nan")
    n_train: int = 0
    n_val: int = 0
    resumed_from: int | None = None


def dataset_nll(params: ParamSet, samples: list[ExpertSample], batch: int = 64) -> tuple[float, float]:
    """Mean NLL and top-1 accuracy of ``params`` on ``samples``."""
    if not samples:
        return float("nan"), float("nan")
    total, hits = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            logp = branch_policy_forward_batch([s.state for s in chunk],
                                               [s.candidates for s in chunk], params)
            pos = torch.as_tensor([s.chosen_pos for s in chunk])
            total += float(-logp[torch.arange(len(chunk)), pos].sum())
            hits += int((logp.argmax(1) == pos).sum())
    return total / len(samples), hits / len(samples)


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, _BC, 0]).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_bc(expert: list[ExpertSample], cfg: TrainConfig, psi: ParamSet | None = None,
             checkpoint_dir=None, training_log: TrainingLog | None = None) -> tuple[ParamSet, BcReport]:
    """Minibatch cross-entropy on the expert choices with a held-out split."""
    cfg.validate()
    if not expert:
        raise ValueError("empty expert dataset")
    psi = psi.clone() if psi is not None else init_params("branch", cfg.seed, cfg.d_h)
    opt = Adam(psi, cfg.lr_bc)
    train_idx, val_idx = split_dataset(len(expert), cfg.val_fraction, cfg.seed)
    train = [expert[i] for i in train_idx]
    val = [expert[i] for i in val_idx]
    rng = np.random.default_rng([cfg.seed, _BC, 1])
    report = BcReport(n_train=len(train), n_val=len(val))
    report.uniform_baseline = (float(np.mean([1.0 / len(s.candidates) for s in val]))
                               if val else float("nan"))
    report.initial_loss, _ = dataset_nll(psi, expert)
    ckpt = Checkpointer(checkpoint_dir, "train_bc", cfg.keep_checkpoints) if checkpoint_dir else None
    start = 1
    if ckpt is not None and (last := ckpt.latest()) is not None:
        params, meta = ckpt.load(last, [""])
        psi = params[""]
        opt = Adam(psi, cfg.lr_bc)
        ckpt.load_opt(opt, "", last)
        _set_rng_state(rng, meta["rng"])
        report.train_loss, report.val_loss = meta["train_loss"], meta["val_loss"]
        report.val_accuracy = meta["val_accuracy"]
        report.resumed_from = last
        start = last + 1
    if training_log is not None:
        training_log.truncate("train_bc", start - 1)

    for epoch in range(start, cfg.N_b + 1):
        lr = stepped_lr(cfg.lr_bc, epoch, cfg)
        opt.set_lr(lr)
        order = rng.permutation(len(train))
        total = 0.0
        psi.requires_grad_(True)
        for b in range(0, len(order), cfg.batch_bc):
            chunk = [train[i] for i in order[b:b + cfg.batch_bc]]
            psi.zero_grad()
            logp = branch_policy_forward_batch([s.state for s in chunk],
                                               [s.candidates for s in chunk], psi)
            pos = torch.as_tensor([s.chosen_pos for s in chunk])
            loss = -logp[torch.arange(len(chunk)), pos].mean()
            loss.backward()
            clip_grad_norm(psi, cfg.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(chunk)
        psi.zero_grad()
        psi.requires_grad_(False)
        report.train_loss.append(total / len(train))
        vl, va = dataset_nll(psi, val)
        report.val_loss.append(vl)
        report.val_accuracy.append(va)
        if training_log is not None:
            training_log.write(epoch, "train_bc", report.train_loss[-1], None, lr)
        if ckpt is not None:
            ckpt.save(epoch, {"": psi}, {"": opt},
                      {"epoch": epoch, "rng": _rng_state(rng), "train_loss": report.train_loss,
                       "val_loss": report.val_loss, "val_accuracy": report.val_accuracy})
    report.final_loss, _ = dataset_nll(psi, expert)
    return psi, report


# ---------------------------------------------------------------------------
# phase 2: concurrent finetuning


@dataclass
class FinetuneReport:
    theta_updates: int = 0
    psi_updates: int = 0
    theta_steps: int = 0
    psi_steps: int = 0
    rewards: list = field(default_factory=list)
    # epoch numbers at which each policy was updated
    theta_schedule: list = field(default_factory=list)
    psi_schedule: list = field(default_factory=list)
    resumed_from: int | None = None


def finetune(train_set: list[MilpInstance], theta: ParamSet, psi: ParamSet, cfg: TrainConfig,
             limits: SolveLimits | None = None, checkpoint_dir=None,
             training_log: TrainingLog | None = None) -> tuple[ParamSet, ParamSet, FinetuneReport]:
    """Both policies act epsilon-greedily; psi is updated every omega_b epochs
    and theta every omega_c epochs, each on its own buffer, which is then cleared."""
    cfg.validate()
    if theta is None or psi is None:
        raise PhaseOrderError("finetuning needs both a cut and a branching checkpoint")
    if not train_set:
        raise ValueError("empty training set")
    limits = limits or SolveLimits()
    theta, psi = theta.clone(), psi.clone()
    opt_c, opt_b = Adam(theta, cfg.lr_ft), Adam(psi, cfg.lr_ft)
    rng = np.random.default_rng([cfg.seed, _FINETUNE])
    baseline = EmaBaseline(cfg.beta_critic, cfg.baseline_init)
    buf_c: list = []
    buf_b: list = []
    report = FinetuneReport()
    ckpt = Checkpointer(checkpoint_dir, "finetune", cfg.keep_checkpoints) if checkpoint_dir else None
    start = 1
    if ckpt is not None and (last := ckpt.latest()) is not None:
        params, meta = ckpt.load(last, ["cut", "branch"])
        theta, psi = params["cut"], params["branch"]
        opt_c, opt_b = Adam(theta, cfg.lr_ft), Adam(psi, cfg.lr_ft)
        ckpt.load_opt(opt_c, "cut", last)
        ckpt.load_opt(opt_b, "branch", last)
        baseline.value = meta["baseline"]
        _set_rng_state(rng, meta["rng"])
        for k in ("theta_updates", "psi_updates", "theta_steps", "psi_steps",
                  "theta_schedule", "psi_schedule"):
            setattr(report, k, meta[k])
        # buffers are saved with the checkpoint so a resume sees the same data
        buf_c, buf_b = _load_buffers(ckpt.dir / f"finetune-{last}.buffers.pt")
        report.resumed_from = last
        start = last + 1
    if training_log is not None:
        training_log.truncate("finetune", start - 1)

    for epoch in range(start, cfg.N_f + 1):
        inst = train_set[int(rng.integers(len(train_set)))]
        solve_seed = int(rng.integers(2 ** 31))
        result = solve(inst, LearnedCutSelector(theta, cfg.epsilon, deterministic=False),
                       LearnedBranchSelector(psi, cfg.epsilon, deterministic=False),
                       limits, rng_seed=solve_seed)
        r = reward(result, cfg.reward_mode)
        adv = baseline.advantage(r)
        baseline.update(r)
        report.rewards.append(r)
        cuts = [d for d in result.trajectory.cut_decisions if d.state is not None]
        branches = [d for d in result.trajectory.branch_decisions if d.state is not None]
        for d, w in zip(cuts, discount_weights(len(cuts), cfg.gamma, cfg.discount_returns)):
            buf_c.append(((d.state, d.action), w * adv))
        for d, w in zip(branches, discount_weights(len(branches), cfg.gamma, cfg.discount_returns)):
            buf_b.append(((d.state, d.candidates, d.action.var), w * adv))
        if epoch % cfg.omega_b == 0:
            steps, _ = reinforce_update(psi, opt_b, [x for x, _ in buf_b], [a for _, a in buf_b],
                                        cfg.batch_rl, cfg.grad_clip, "branch")
            buf_b = []
            report.psi_updates += 1
            report.psi_steps += steps
            report.psi_schedule.append(epoch)
        if epoch % cfg.omega_c == 0:
            steps, _ = reinforce_update(theta, opt_c, [x for x, _ in buf_c], [a for _, a in buf_c],
                                        cfg.batch_rl, cfg.grad_clip, "cut")
            buf_c = []
            report.theta_updates += 1
            report.theta_steps += steps
            report.theta_schedule.append(epoch)
        if training_log is not None:
            training_log.write(epoch, "finetune", r, baseline.value, cfg.lr_ft)
        if ckpt is not None:
            _save_buffers(ckpt.dir / f"finetune-{epoch}.buffers.pt", buf_c, buf_b)
            meta = {"epoch": epoch, "baseline": baseline.value, "rng": _rng_state(rng)}
            meta.update({k: getattr(report, k) for k in (
                "theta_updates", "psi_updates", "theta_steps", "psi_steps",
                "theta_schedule", "psi_schedule")})
            ckpt.save(epoch, {"cut": theta, "branch": psi}, {"cut": opt_c, "branch": opt_b}, meta)
            for old in sorted(ckpt.dir.glob("finetune-*.buffers.pt")):
                e = int(old.name.split("-")[1].split(".")[0])
                if e not in ckpt.epochs():
                    old.unlink()
    return theta, psi, report


def _save_buffers(path: Path, buf_c: list, buf_b: list) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(pickle.dumps((buf_c, buf_b), protocol=4))
    tmp.replace(path)


def _load_buffers(path: Path) -> tuple[list, list]:
    if not path.exists():
        return [], []
    return pickle.loads(path.read_bytes())


# ---------------------------------------------------------------------------
# evaluation


CUT_CHOICES = ("learned", "heuristic", "all", "none")
BRANCH_CHOICES = ("learned", "heuristic", "strong_branching", "random")
METRICS = ("wall_s", "virtual_s", "pd_integral", "pd_gap", "nodes", "lp_iters")
ROW_COLUMNS = ("instance", "policy_combo", "wall_s", "virtual_s", "pd_integral", "pd_gap",
               "nodes", "lp_iters", "seed")


def make_selectors(cut: str, branch: str, theta: ParamSet | None = None,
                   psi: ParamSet | None = None):
    """Deterministic-evaluation selectors for a (cut, branch) combo."""
    if cut not in CUT_CHOICES:
        raise ConfigError(f"cut policy must be one of {CUT_CHOICES}")
    if branch not in BRANCH_CHOICES:
        raise ConfigError(f"branch policy must be one of {BRANCH_CHOICES}")
    if cut == "learned" and theta is None:
        raise PhaseOrderError("learned cut policy needs a cut checkpoint")
    if branch == "learned" and psi is None:
        raise PhaseOrderError("learned branching needs a branching checkpoint")
    cut_sel = {
        "learned": lambda: LearnedCutSelector(theta, 0.0, deterministic=True),
        "heuristic": HeuristicCutSelector,
        "all": AllCutsSelector,
        "none": lambda: None,
    }[cut]()
    branch_sel = {
        "learned": lambda: LearnedBranchSelector(psi, 0.0, deterministic=True),
        "heuristic": MostFractionalBranching,
        "strong_branching": StrongBranching,
        "random": RandomBranching,
    }[branch]()
    return cut_sel, branch_sel


def _eval_one(args) -> dict:
    inst, combo, cut, branch, theta, psi, limits, seed = args
    cut_sel, branch_sel = make_selectors(cut, branch, theta, psi)
    res = solve(inst, cut_sel, branch_sel, limits, rng_seed=seed, record=False)
    horizon = max(res.timeline.events[-1].clock, limits.seconds_per_iteration)
    return {
        "instance": inst.name,
        "policy_combo": combo,
        "wall_s": res.wall_seconds,
        "virtual_s": res.virtual_seconds,
        "pd_integral": pd_integral(res.timeline, horizon),
        "pd_gap": res.pd_gap,
        "nodes": res.nodes,
        "lp_iters": res.lp_iterations_total,
        "seed": seed,
    }


def summarize(rows: list[dict]) -> dict:
    """Per combo: mean over all rows, std across per-seed means, and std over rows."""
    out = {}
    for combo in dict.fromkeys(r["policy_combo"] for r in rows):
        sub = [r for r in rows if r["policy_combo"] == combo]
        seeds = sorted({r["seed"] for r in sub})
        entry = {"n_rows": len(sub), "seeds": seeds}
        for m in METRICS:
            vals = np.array([float(r[m]) for r in sub])
            per_seed = np.array([np.mean([float(r[m]) for r in sub if r["seed"] == s])
                                 for s in seeds])
            entry[m] = {"mean": float(vals.mean()), "std": float(per_seed.std()),
                        "std_rows": float(vals.std())}
        out[combo] = entry
    return out


def evaluate(test_set: list[MilpInstance], theta: ParamSet | None, psi: ParamSet | None,
             limits: SolveLimits | None = None, combos=(("learned", "learned"),),
             seeds=(0,), n_jobs: int = 1) -> tuple[list[dict], dict]:
    """Solve every instance under every combo and seed with deterministic policies."""
    limits = limits or SolveLimits()
    tasks = []
    for cut, branch in combos:
        make_selectors(cut, branch, theta, psi)  # fail before any solve
        combo = f"{cut}+{branch}"
        for seed in seeds:
            for inst in test_set:
                tasks.append((inst, combo, cut, branch,
                              theta if cut == "learned" else None,
                              psi if branch == "learned" else None, limits, int(seed)))
    rows = _parallel_map(_eval_one, tasks, n_jobs)
    return rows, summarize(rows)


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def uniform_accuracy(samples: list[ExpertSample]) -> float:
    return float(np.mean([1.0 / len(s.candidates) for s in samples])) if samples else math.nan
