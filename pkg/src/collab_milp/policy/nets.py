"""Forward passes of the cut-selection and branching networks.

The networks are written functionally over a ParamSet so that every tensor
is a leaf that autograd (and a finite-difference check) can reach directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..features import BipartiteState, CutState
from ..records import BranchAction, CutAction
from .params import ParamSet

DTYPE = torch.float64
LOG_STD_MIN, LOG_STD_MAX = -4.0, 0.5
_K_EDGE = 1e-12

_torch_ready = False


def _ready() -> None:
    global _torch_ready
    if not _torch_ready:
        torch.set_num_threads(1)
        _torch_ready = True


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _linear(p: ParamSet, name: str, x: torch.Tensor) -> torch.Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def _gru_cell(p: ParamSet, name: str, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    gi = x @ p[name + ".w_ih"] + p[name + ".b_ih"]
    gh = h @ p[name + ".w_hh"] + p[name + ".b_hh"]
    d = h.shape[-1]
    r = torch.sigmoid(gi[..., :d] + gh[..., :d])
    z = torch.sigmoid(gi[..., d:2 * d] + gh[..., d:2 * d])
    n = torch.tanh(gi[..., 2 * d:] + r * gh[..., 2 * d:])
    return (1.0 - z) * n + z * h


@dataclass
class GraphEmbedding:
    var: torch.Tensor  # (n, d)
    cons: torch.Tensor  # (m, d)
    pooled: torch.Tensor  # (d,)


def graph_encode_batch(states, params: ParamSet) -> tuple[GraphEmbedding, np.ndarray]:
    """Encode several graphs as one disjoint union.

    Returns the stacked embeddings (``pooled`` has one row per graph) and the
    variable offset of each graph inside ``var``.
    """
    _ready()
    d = params.arch["d_h"]
    n_sizes = np.array([s.n_vars for s in states], dtype=np.int64)
    m_sizes = np.array([s.n_cons for s in states], dtype=np.int64)
    v_off = np.concatenate([[0], np.cumsum(n_sizes)])
    c_off = np.concatenate([[0], np.cumsum(m_sizes)])
    C = _t(np.concatenate([s.C for s in states]).reshape(-1, params.arch["cons_features"]))
    V = _t(np.concatenate([s.V for s in states]).reshape(-1, params.arch["var_features"]))
    rows = torch.as_tensor(np.concatenate(
        [np.asarray(s.edge_index[0], dtype=np.int64) + c_off[b] for b, s in enumerate(states)]))
    cols = torch.as_tensor(np.concatenate(
        [np.asarray(s.edge_index[1], dtype=np.int64) + v_off[b] for b, s in enumerate(states)]))
    w = _t(np.concatenate([np.asarray(s.edge_attr, dtype=np.float64) for s in states]))[:, None]
    m, n = C.shape[0], V.shape[0]

    hc = torch.tanh(_linear(params, "g.cons_embed", C))
    hv = torch.tanh(_linear(params, "g.var_embed", V))

    # weighted incidence as a sparse matrix; much faster than gather + index_add
    adj = torch.sparse_coo_tensor(torch.stack([rows, cols]), w[:, 0], (m, n),
                                  check_invariants=False).coalesce()
    msg = _linear(params, "g.v2c_msg", hv)
    agg = torch.sparse.mm(adj, msg)
    hc = torch.tanh(_linear(params, "g.cons_update", torch.cat([hc, agg], dim=1)))

    msg = _linear(params, "g.c2v_msg", hc)
    agg = torch.sparse.mm(adj.t().coalesce(), msg)
    hv = torch.tanh(_linear(params, "g.var_update", torch.cat([hv, agg], dim=1)))

    B = len(states)
    var_graph = torch.as_tensor(np.repeat(np.arange(B), n_sizes))
    cons_graph = torch.as_tensor(np.repeat(np.arange(B), m_sizes))
    pv = torch.zeros(B, d, dtype=DTYPE).index_add(0, var_graph, hv)
    pc = torch.zeros(B, d, dtype=DTYPE).index_add(0, cons_graph, hc)
    # graphs without constraints (or variables) pool to zero on that side
    pv = pv / torch.as_tensor(np.maximum(n_sizes, 1), dtype=DTYPE)[:, None]
    pc = pc / torch.as_tensor(np.maximum(m_sizes, 1), dtype=DTYPE)[:, None]
    pooled = _linear(params, "g.out", torch.cat([pv, pc], dim=1))
    return GraphEmbedding(hv, hc, pooled), v_off


def graph_encode(state: BipartiteState, params: ParamSet) -> GraphEmbedding:
    """Constraint-side then variable-side half convolution, then mean pooling."""
    emb, _ = graph_encode_batch([state], params)
    return GraphEmbedding(emb.var, emb.cons, emb.pooled[0])


# ---------------------------------------------------------------------------
# cut policy


def canonical_cut_order(features: np.ndarray) -> np.ndarray:
    """Content-based order of the pool rows; makes the sequence encoder blind to pool order."""
    if features.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(features.T[::-1])


def _masked_log_softmax(u: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    u = u.masked_fill(mask, -math.inf)
    return torch.log_softmax(u, dim=0)


class CutForward:
    """Encoded pool; ``ratio_mean``/``ratio_std`` parameterize the pre-squash
    Gaussian of k, ``pointer_log_probs`` runs the decoder one step at a time."""

    def __init__(self, state: CutState, params: ParamSet):
        _ready()
        self.params = params
        self.pool_size = state.pool_size
        self.ratio_min = float(params.arch.get("ratio_min", 0.0))
        if self.pool_size == 0:
            self.ratio_mean = self.ratio_std = None
            return
        p = params
        d = p.arch["d_h"]
        g = graph_encode(state.graph, p).pooled

        X = _t(state.cut_features)
        order = canonical_cut_order(state.cut_features)
        h = torch.zeros(d, dtype=DTYPE)
        seq = []
        for i in order:
            h = _gru_cell(p, "cut_rnn", X[i], h)
            seq.append(h)
        emb = torch.stack(seq)[torch.as_tensor(np.argsort(order))]

        keys = torch.stack([g, emb.mean(0)])
        att = torch.softmax((emb @ p["att.q"]) @ (keys @ p["att.k"]).T / math.sqrt(d), dim=1)
        ctx = att @ (keys @ p["att.v"])
        F = torch.tanh(_linear(p, "fuse", torch.cat([emb, ctx], dim=1)))
        self.F = F

        hid = torch.tanh(_linear(p, "ratio.hidden", torch.cat([F.mean(0), g])))
        out = _linear(p, "ratio.out", hid)
        self.ratio_mean = out[0]
        self.ratio_std = torch.exp(LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * torch.sigmoid(out[1]))

        self._glimpse_ref = F @ p["glimpse.ref"]
        self._ptr_ref = F @ p["ptr.ref"]

    # ratio head -----------------------------------------------------------

    def k_from_z(self, z: float) -> float:
        return self.ratio_min + (1.0 - self.ratio_min) * 0.5 * (math.tanh(z) + 1.0)

    def z_from_k(self, k: float) -> float:
        u = (k - self.ratio_min) / (1.0 - self.ratio_min)
        u = min(max(u, _K_EDGE), 1.0 - _K_EDGE)
        return math.atanh(2.0 * u - 1.0)

    def ratio_log_density(self, z: float) -> torch.Tensor:
        """log density of k = squash(z) under the head's squashed Gaussian."""
        mu, sd = self.ratio_mean, self.ratio_std
        zt = torch.tensor(z, dtype=DTYPE)
        log_normal = -0.5 * ((zt - mu) / sd) ** 2 - torch.log(sd) - 0.5 * math.log(2 * math.pi)
        # log |dk/dz| = log((1-rmin)/2) + log(1 - tanh^2 z), the latter in a stable form
        log_jac = math.log((1.0 - self.ratio_min) / 2.0) + 2.0 * (
            math.log(2.0) - abs(z) - math.log1p(math.exp(-2.0 * abs(z))))
        return log_normal - log_jac

    def count(self, k: float) -> int:
        return min(self.pool_size, max(0, math.ceil(k * self.pool_size)))

    # pointer head ---------------------------------------------------------

    def pointer_steps(self):
        """Generator: send the chosen index after each yielded log-prob vector."""
        p = self.params
        F = self.F
        k = self.pool_size
        mask = torch.zeros(k, dtype=torch.bool)
        h = F.mean(0)
        x = p["ptr.start"]
        while True:
            h = _gru_cell(p, "ptr.cell", x, h)
            u = self._glimpse_ref @ (h @ p["glimpse.query"])
            a = torch.exp(_masked_log_softmax(u, mask))
            q = a @ F
            u = self._ptr_ref @ (q @ p["ptr.query"])
            logp = _masked_log_softmax(u, mask)
            chosen = yield logp
            mask = mask.clone()
            mask[chosen] = True
            x = F[chosen]

    def pointer_log_probs(self, selected) -> list[torch.Tensor]:
        """Stepwise log-prob vectors when decoding the given ordered selection."""
        out = []
        if not selected:
            return out
        gen = self.pointer_steps()
        logp = next(gen)
        for i, j in enumerate(selected):
            out.append(logp)
            if i + 1 < len(selected):
                logp = gen.send(j)
        gen.close()
        return out

    def log_prob(self, action: CutAction) -> torch.Tensor:
        """Joint log-probability of ``action``: ratio density plus pointer steps."""
        if self.pool_size == 0:
            return torch.zeros((), dtype=DTYPE)
        z = action.ratio_z if action.ratio_z is not None else self.z_from_k(action.ratio_k)
        total = self.ratio_log_density(z)
        for logp, j in zip(self.pointer_log_probs(list(action.selected)), action.selected):
            total = total + logp[j]
        return total


def cut_policy_forward(state: CutState, params: ParamSet) -> CutForward:
    return CutForward(state, params)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, len(probs) - 1)
    while probs[j] <= 0.0:  # never land on a masked index
        j -= 1
    return j


def sample_cut_action(fwd: CutForward, rng: np.random.Generator, epsilon: float = 0.0,
                      deterministic: bool = False) -> CutAction:
    """Epsilon-greedy draw; the returned log_prob is always under the policy."""
    if fwd.pool_size == 0:
        return CutAction(ratio_k=0.0, selected=(), log_prob=0.0, source="empty")
    with torch.no_grad():
        explore = (not deterministic) and epsilon > 0.0 and rng.random() < epsilon
        if explore:
            k = fwd.ratio_min + (1.0 - fwd.ratio_min) * rng.random()
            z = fwd.z_from_k(k)
            k = fwd.k_from_z(z)
            selected = [int(i) for i in rng.permutation(fwd.pool_size)[:fwd.count(k)]]
            action = CutAction(k, tuple(selected), 0.0, z, "explore")
            return CutAction(k, tuple(selected), float(fwd.log_prob(action)), z, "explore")
        mu, sd = float(fwd.ratio_mean), float(fwd.ratio_std)
        z = mu if deterministic else mu + sd * float(rng.standard_normal())
        k = fwd.k_from_z(z)
        total = fwd.ratio_log_density(z)
        selected: list[int] = []
        n_pick = fwd.count(k)
        if n_pick:
            gen = fwd.pointer_steps()
            logp = next(gen)
            while True:
                probs = torch.exp(logp).numpy()
                j = int(np.argmax(probs)) if deterministic else _draw(probs, rng)
                total = total + logp[j]
                selected.append(j)
                if len(selected) == n_pick:
                    break
                logp = gen.send(j)
            gen.close()
        return CutAction(k, tuple(selected), float(total), z, "policy")


# ---------------------------------------------------------------------------
# branching policy


def branch_policy_forward_batch(states, candidate_lists, params: ParamSet) -> torch.Tensor:
    """Padded (batch, max candidates) log-probabilities; padding holds -inf."""
    emb, v_off = graph_encode_batch(states, params)
    sizes = [len(c) for c in candidate_lists]
    if min(sizes) == 0:
        raise ValueError("branching needs at least one candidate")
    flat = torch.as_tensor(np.concatenate(
        [np.asarray(c, dtype=np.int64) + v_off[b] for b, c in enumerate(candidate_lists)]))
    owner = torch.as_tensor(np.repeat(np.arange(len(states)), sizes))
    hid = torch.tanh(_linear(params, "score.hidden",
                             torch.cat([emb.var[flat], emb.pooled[owner]], dim=1)))
    # no output bias: a shared shift cancels in the softmax
    scores = (hid @ params["score.out.w"])[:, 0]
    slot = torch.as_tensor(np.concatenate([np.arange(k) for k in sizes]))
    padded = torch.full((len(states), max(sizes)), -math.inf, dtype=DTYPE)
    padded = padded.index_put((owner, slot), scores)
    return torch.log_softmax(padded, dim=1)


def branch_policy_forward(state: BipartiteState, candidates, params: ParamSet) -> torch.Tensor:
    """Log-probabilities over ``candidates`` (in the given order)."""
    return branch_policy_forward_batch([state], [candidates], params)[0]


def sample_branch_action(log_probs: torch.Tensor, candidates, rng: np.random.Generator,
                         epsilon: float = 0.0, deterministic: bool = False) -> BranchAction:
    lp = log_probs.detach().numpy()
    if (not deterministic) and epsilon > 0.0 and rng.random() < epsilon:
        i = int(rng.integers(len(candidates)))
        source = "explore"
    elif deterministic:
        i = int(np.argmax(lp))
        source = "policy"
    else:
        i = _draw(np.exp(lp), rng)
        source = "policy"
    return BranchAction(int(candidates[i]), float(lp[i]), source)


def nll_loss(log_probs: torch.Tensor, chosen: int) -> torch.Tensor:
    return -log_probs[chosen]


def selection_probability(fwd: CutForward, index: int, max_pool: int = 8) -> float:
    """Exact probability that the policy selects pool entry ``index``.

    Sums, over every selection count c, P(count = c) from the Gaussian CDF of
    the pre-squash ratio times P(index among the first c pointer picks),
    enumerating pointer prefixes. Only meant for small pools.
    """
    n = fwd.pool_size
    if n == 0:
        return 0.0
    if n > max_pool:
        raise ValueError(f"pool of {n} cuts is too large to enumerate")
    with torch.no_grad():
        mu, sd = float(fwd.ratio_mean), float(fwd.ratio_std)

        def cdf_of_k(k: float) -> float:
            u = (k - fwd.ratio_min) / (1.0 - fwd.ratio_min)
            if u <= 0.0:
                return 0.0
            if u >= 1.0:
                return 1.0
            z = math.atanh(2.0 * u - 1.0)
            return 0.5 * math.erfc(-(z - mu) / (sd * math.sqrt(2.0)))

        # P(index within the first c picks), c = 1..n
        hit_by = [0.0] * (n + 1)

        def walk(prefix: list[int], prob: float):
            depth = len(prefix)
            if depth == n or prob == 0.0:
                return
            # the trailing placeholder is never fed back to the decoder
            probs = torch.exp(fwd.pointer_log_probs(prefix + [-1])[-1]).numpy()
            for j in range(n):
                if j in prefix or probs[j] == 0.0:
                    continue
                pj = prob * float(probs[j])
                if j == index:
                    for c in range(depth + 1, n + 1):
                        hit_by[c] += pj
                else:
                    walk(prefix + [j], pj)

        walk([], 1.0)
        total = 0.0
        for c in range(1, n + 1):
            p_count = cdf_of_k(c / n) - cdf_of_k((c - 1) / n)
            total += p_count * hit_by[c]
        return total
