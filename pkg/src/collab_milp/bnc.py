"""Branch-and-cut search with pluggable cut-selection and branching policies."""

from __future__ import annotations

import enum
import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cuts import CutPool, apply_cuts, generate_gomory_cuts
from .features import (AgeCounters, BipartiteState, CutState, IncumbentStats,
                       extract_bipartite, extract_cut_state)
from .milp import (DEFAULT_TOL, MilpInstance, Tolerances, fractional_candidates,
                   is_feasible)
from .records import (BranchAction, BranchDecision, CutAction, CutDecision,
                      Trajectory)
from .simplex import LpSolution, LpStatus, WarmStart, solve_lp

INFEASIBLE_DELTA = 1e20
SB_EPS = 1e-6


class SolveStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    LIMIT = "Limit"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class SolveLimits:
    time_limit_s: float = 300.0
    node_limit: int = 100_000
    cut_rounds_per_node: int = 1
    gap_limit: float = 1e-9
    # deepest node that still runs cut rounds; None means every node
    cut_depth_limit: int | None = None
    # "virtual": LP iterations times seconds_per_iteration; "wall": real time
    clock: str = "virtual"
    seconds_per_iteration: float = 1e-5

    def __post_init__(self):
        if not (self.time_limit_s > 0 and self.node_limit > 0 and self.gap_limit > 0
                and self.seconds_per_iteration > 0):
            raise ValueError("limits must be positive")
        if self.cut_rounds_per_node < 0:
            raise ValueError("cut_rounds_per_node must be nonnegative")
        if self.clock not in ("virtual", "wall"):
            raise ValueError("clock must be 'virtual' or 'wall'")


@dataclass(frozen=True)
class BoundEvent:
    clock: float
    node_count: int
    primal: float
    dual: float
    wall: float = 0.0


@dataclass
class BoundTimeline:
    events: list[BoundEvent] = field(default_factory=list)
    # stands in for the primal bound until the first incumbent
    initial_primal: float = math.inf

    def add(self, event: BoundEvent, force: bool = False) -> None:
        if self.events:
            last = self.events[-1]
            event = BoundEvent(
                max(event.clock, last.clock), event.node_count,
                min(event.primal, last.primal), max(event.dual, last.dual), event.wall,
            )
            if not force and event.primal == last.primal and event.dual == last.dual:
                return
        self.events.append(event)


@dataclass(eq=False)
class Node:
    id: int
    parent_id: int | None
    depth: int
    lb: np.ndarray
    ub: np.ndarray
    problem: MilpInstance
    dual_bound: float
    warm: WarmStart | None = None
    lp: LpSolution | None = None
    cuts_added: int = 0

    @property
    def local_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lb, self.ub


@dataclass(eq=False)
class SolveResult:
    status: SolveStatus
    incumbent: np.ndarray | None
    primal: float
    dual: float
    timeline: BoundTimeline
    nodes: int
    lp_iterations_total: int
    wall_seconds: float
    virtual_seconds: float
    trajectory: Trajectory

    @property
    def pd_gap(self) -> float:
        return pd_gap(self.primal, self.dual)


# ---------------------------------------------------------------------------
# metrics


def pd_gap(primal: float, dual: float) -> float:
    if math.isinf(primal) or math.isinf(dual):
        if primal == dual:
            return 0.0
        return math.inf
    return abs(primal - dual) / max(abs(primal), abs(dual), 1e-10)


def pd_integral(timeline: BoundTimeline, horizon_s: float) -> float:
    """Area between primal and dual bound curves over [0, horizon_s].

    Bounds are piecewise constant between events and the final bounds are
    held to the horizon. The first event's bounds also cover [0, t_0].
    Before an incumbent exists the timeline's initial primal bound is used.
    """
    if horizon_s <= 0:
        raise ValueError("horizon must be positive")
    if not timeline.events:
        raise ValueError("empty timeline")
    total = 0.0
    evs = timeline.events
    for k, ev in enumerate(evs):
        start = 0.0 if k == 0 else ev.clock
        end = evs[k + 1].clock if k + 1 < len(evs) else horizon_s
        start, end = min(start, horizon_s), min(end, horizon_s)
        if end <= start:
            continue
        p = ev.primal if math.isfinite(ev.primal) else timeline.initial_primal
        d = ev.dual
        if p == d or (math.isinf(p) and math.isinf(d)):
            continue
        total += (end - start) * max(p - d, 0.0)
    return total


# ---------------------------------------------------------------------------
# branching and strong branching


def branch(node: Node, var: int, frac_value: float, next_id: int = 0,
           tol: Tolerances = DEFAULT_TOL) -> tuple[Node, Node]:
    """Split on x_var <= floor(v) (left) and x_var >= ceil(v) (right)."""
    if abs(frac_value - round(frac_value)) <= tol.tol_int:
        raise ValueError(f"value {frac_value} of x{var} is integral")
    warm = node.lp.warm_start() if node.lp is not None else node.warm
    bound = node.lp.objective if node.lp is not None else node.dual_bound
    bound = max(bound, node.dual_bound)
    left_ub = node.ub.copy()
    left_ub[var] = math.floor(frac_value)
    right_lb = node.lb.copy()
    right_lb[var] = math.ceil(frac_value)
    left = Node(next_id, node.id, node.depth + 1, node.lb, left_ub, node.problem, bound, warm)
    right = Node(next_id + 1, node.id, node.depth + 1, right_lb, node.ub, node.problem, bound, warm)
    return left, right


def strong_branching_scores(node: Node, candidates, tol: Tolerances = DEFAULT_TOL,
                            stats: dict | None = None) -> np.ndarray:
    """Product score of the two child LP bound gains for each candidate."""
    sol = node.lp
    if sol is None or sol.status is not LpStatus.OPTIMAL:
        raise ValueError("node LP must be solved to optimality")
    warm = sol.warm_start()
    base = sol.objective
    scores = np.zeros(len(candidates))
    iters = 0
    for k, j in enumerate(candidates):
        v = sol.x[j]
        deltas = []
        for side in (0, 1):
            lb, ub = node.lb, node.ub
            if side == 0:
                ub = ub.copy()
                ub[j] = math.floor(v)
            else:
                lb = lb.copy()
                lb[j] = math.ceil(v)
            child = solve_lp(node.problem, tol, lb=lb, ub=ub, warm=warm)
            iters += child.iterations
            if child.status is LpStatus.INFEASIBLE:
                deltas.append(INFEASIBLE_DELTA)
            elif child.status is LpStatus.OPTIMAL:
                deltas.append(min(max(child.objective - base, 0.0), INFEASIBLE_DELTA))
            else:
                deltas.append(0.0)
        scores[k] = max(deltas[0], SB_EPS) * max(deltas[1], SB_EPS)
    if stats is not None:
        stats["lp_iterations"] = stats.get("lp_iterations", 0) + iters
    return scores


# ---------------------------------------------------------------------------
# decision contexts handed to policies


class NodeContext:
    def __init__(self, solver: "_Search", node: Node, sol: LpSolution):
        self.solver = solver
        self.node = node
        self.problem = node.problem
        self.sol = sol
        self.rng = solver.rng
        self.tol = solver.tol
        self._graph = None

    def graph(self) -> BipartiteState:
        if self._graph is None:
            self._graph = extract_bipartite(self.sol, self.problem, self.solver.incumbent_stats,
                                            self.solver.ages, self.tol.tol_feas)
        return self._graph


class CutContext(NodeContext):
    def __init__(self, solver, node, sol, pool: CutPool):
        super().__init__(solver, node, sol)
        self.pool = pool
        self._state = None

    def state(self) -> CutState:
        if self._state is None:
            self._state = extract_cut_state(self.pool, self.sol, self.problem, graph=self.graph())
        return self._state


class BranchContext(NodeContext):
    def __init__(self, solver, node, sol, candidates):
        super().__init__(solver, node, sol)
        self.candidates = tuple(candidates)
        self.scores = None

    def state(self) -> BipartiteState:
        return self.graph()

    def strong_branching_scores(self) -> np.ndarray:
        """Strong branching scores; the child LP iterations are charged to the clock."""
        if self.scores is None:
            stats = {}
            self.scores = strong_branching_scores(self.node, self.candidates, self.tol, stats)
            self.solver.lp_iterations += stats.get("lp_iterations", 0)
        return self.scores


# ---------------------------------------------------------------------------
# heuristic policies


def heuristic_cut_scores(pool: CutPool) -> list[int]:
    """Greedy order: 0.6 efficacy + 0.4 normalized violation - 0.1 max parallelism to chosen cuts."""
    k = len(pool)
    if k == 0:
        return []
    base = np.array([0.6 * f.efficacy + 0.4 * f.normalized_violation for f in pool.features])
    unit = np.stack([c.coeffs / np.linalg.norm(c.coeffs) for c in pool.cuts])
    n_pick = math.ceil(0.3 * k)
    chosen: list[int] = []
    penalty = np.zeros(k)
    for _ in range(n_pick):
        score = base - 0.1 * penalty
        score[chosen] = -np.inf
        best = int(np.argmax(score))
        chosen.append(best)
        penalty = np.maximum(penalty, unit @ unit[best])
    return chosen


def heuristic_cut_policy(pool: CutPool) -> list[int]:
    return heuristic_cut_scores(pool)


def most_fractional_branching(sol: LpSolution, instance: MilpInstance,
                              tol: Tolerances = DEFAULT_TOL) -> int:
    cands = fractional_candidates(sol.x, instance, tol)
    if not cands:
        raise ValueError("no fractional candidate")
    return most_fractional_of(sol.x, cands)


def most_fractional_of(x, candidates) -> int:
    x = np.asarray(x)
    best, best_dist = -1, math.inf
    for j in sorted(candidates):
        f = x[j] - math.floor(x[j])
        dist = abs(f - 0.5)
        if dist < best_dist:
            best, best_dist = j, dist
    return best


class HeuristicCutSelector:
    name = "heuristic"

    def select_cuts(self, ctx: CutContext) -> CutAction:
        chosen = heuristic_cut_policy(ctx.pool)
        k = len(chosen) / len(ctx.pool) if len(ctx.pool) else 0.0
        return CutAction(ratio_k=k, selected=tuple(chosen), source="heuristic")


class AllCutsSelector:
    name = "all"

    def select_cuts(self, ctx: CutContext) -> CutAction:
        return CutAction(ratio_k=1.0, selected=tuple(range(len(ctx.pool))), source="heuristic")


class MostFractionalBranching:
    name = "heuristic"

    def select_branch(self, ctx: BranchContext) -> BranchAction:
        return BranchAction(most_fractional_of(ctx.sol.x, ctx.candidates), source="heuristic")


class RandomBranching:
    name = "random"

    def select_branch(self, ctx: BranchContext) -> BranchAction:
        k = int(ctx.rng.integers(len(ctx.candidates)))
        return BranchAction(ctx.candidates[k], log_prob=-math.log(len(ctx.candidates)), source="random")


class StrongBranching:
    name = "strong_branching"

    def select_branch(self, ctx: BranchContext) -> BranchAction:
        scores = ctx.strong_branching_scores()
        return BranchAction(ctx.candidates[int(np.argmax(scores))], source="strong")


# ---------------------------------------------------------------------------
# the search


class _Search:
    def __init__(self, instance, cut_policy, branch_policy, limits, tol, rng_seed, record):
        self.instance = instance
        self.cut_policy = cut_policy
        self.branch_policy = branch_policy or MostFractionalBranching()
        self.limits = limits
        self.tol = tol
        self.rng = np.random.default_rng(rng_seed)
        self.record = record
        self.lp_iterations = 0
        self.nodes = 0
        self.next_id = 0
        self.primal = math.inf
        self.incumbent = None
        self.incumbent_stats = IncumbentStats()
        self.ages = AgeCounters()
        self.timeline = BoundTimeline()
        self.trajectory = Trajectory()
        self.heap: list = []
        self.incomplete = False
        self.t0 = time.perf_counter()

    def clock(self) -> float:
        if self.limits.clock == "wall":
            return time.perf_counter() - self.t0
        return self.virtual()

    def virtual(self) -> float:
        return self.lp_iterations * self.limits.seconds_per_iteration

    def _event(self, dual: float, force: bool = False):
        self.timeline.add(BoundEvent(self.clock(), self.nodes, self.primal, dual,
                                     time.perf_counter() - self.t0), force)

    def global_dual(self, current: float | None = None) -> float:
        cands = [k[0] for k in self.heap]
        if current is not None:
            cands.append(current)
        if not cands:
            return self.primal
        return min(min(cands), self.primal)

    def _lp(self, node: Node, warm: WarmStart | None) -> LpSolution:
        sol = solve_lp(node.problem, self.tol, lb=node.lb, ub=node.ub, warm=warm)
        self.lp_iterations += sol.iterations
        if sol.status is LpStatus.ITERATION_LIMIT and warm is not None:
            sol = solve_lp(node.problem, self.tol, lb=node.lb, ub=node.ub)
            self.lp_iterations += sol.iterations
        if sol.status is LpStatus.OPTIMAL:
            self.ages.observe(sol, node.problem, self.tol.tol_feas)
        return sol

    def _new_incumbent(self, x: np.ndarray, obj: float):
        if obj < self.primal:
            self.primal = obj
            self.incumbent = np.array(x, dtype=float)
            self.incumbent_stats.update(x)

    def _margin(self) -> float:
        # much tighter than tol_dual so returned optima are exact up to LP noise
        return min(self.tol.tol_dual, 1e-9 * max(1.0, abs(self.primal)))

    def _limit_hit(self) -> bool:
        return self.nodes >= self.limits.node_limit or self.clock() >= self.limits.time_limit_s

    def _initial_primal(self, sol: LpSolution) -> float:
        x = np.array(sol.x, dtype=float)
        idx = list(self.instance.integrality)
        x[idx] = np.round(x[idx])
        if is_feasible(self.instance, x, self.tol):
            return float(self.instance.objective @ x)
        return 10.0 * abs(sol.objective) + 1.0

    def run(self) -> SolveResult:
        inst = self.instance
        root = Node(self._take_id(), None, 0, inst.lb.copy(), inst.ub.copy(), inst, -math.inf)
        heapq.heappush(self.heap, (-math.inf, root.id, root))
        status = None
        first = True
        while self.heap:
            if self._limit_hit():
                status = SolveStatus.LIMIT
                break
            bound, _, node = heapq.heappop(self.heap)
            if bound >= self.primal - self._margin():
                # best-first: every remaining node is pruned as well
                self.heap.clear()
                break
            self._process(node, first)
            first = False
            gd = self.global_dual()
            if self.primal < math.inf and pd_gap(self.primal, gd) <= self.limits.gap_limit:
                self.heap.clear()
                break
        if status is None:
            status = SolveStatus.LIMIT if self.incomplete else SolveStatus.OPTIMAL
            if math.isinf(self.primal) and not self.incomplete:
                status = SolveStatus.INFEASIBLE
        dual = self.global_dual() if status is SolveStatus.LIMIT else self.primal
        if status is SolveStatus.INFEASIBLE:
            dual = math.inf
        self._event(dual, force=True)
        wall = time.perf_counter() - self.t0
        self.trajectory.terminal = {
            "status": status.value,
            "virtual_clock": self.virtual(),
            "wall_seconds": wall,
            "pd_gap": pd_gap(self.primal, dual),
            "nodes": self.nodes,
            "lp_iterations": self.lp_iterations,
        }
        return SolveResult(status, self.incumbent, self.primal, dual, self.timeline, self.nodes,
                           self.lp_iterations, wall, self.virtual(), self.trajectory)

    def _take_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def _process(self, node: Node, is_root: bool):
        self.nodes += 1
        sol = self._lp(node, node.warm)
        if is_root and sol.status is LpStatus.OPTIMAL:
            self.timeline.initial_primal = self._initial_primal(sol)
        if not self._settle(node, sol):
            return
        limits = self.limits
        can_cut = (self.cut_policy is not None
                   and (limits.cut_depth_limit is None or node.depth <= limits.cut_depth_limit))
        for _ in range(limits.cut_rounds_per_node if can_cut else 0):
            pool = generate_gomory_cuts(sol, node.problem, self.tol)
            if not len(pool):
                break
            ctx = CutContext(self, node, sol, pool)
            action = self.cut_policy.select_cuts(ctx)
            if self.record:
                self.trajectory.cut_decisions.append(
                    CutDecision(ctx._state, action, self.clock(), node.id))
            if not action.selected:
                break
            node.problem = apply_cuts(node.problem, [pool.cuts[i] for i in action.selected])
            node.cuts_added += len(action.selected)
            sol = self._lp(node, sol.warm_start())
            if not self._settle(node, sol):
                return
        cands = fractional_candidates(sol.x, node.problem, self.tol)
        ctx = BranchContext(self, node, sol, cands)
        action = self.branch_policy.select_branch(ctx)
        if action.var not in cands:
            raise ValueError(f"branching policy chose x{action.var}, not a fractional candidate")
        if self.record:
            self.trajectory.branch_decisions.append(BranchDecision(
                ctx._graph, ctx.candidates, action, self.clock(), node.id, ctx.scores))
        left, right = branch(node, action.var, sol.x[action.var], self._take_id(), self.tol)
        self._take_id()
        for child in (left, right):
            heapq.heappush(self.heap, (child.dual_bound, child.id, child))
        self._event(self.global_dual())

    def _settle(self, node: Node, sol: LpSolution) -> bool:
        """Record the LP at ``node``; False when the node is finished (pruned or integral)."""
        node.lp = sol
        if sol.status is LpStatus.INFEASIBLE:
            self._event(self.global_dual())
            return False
        if sol.status is not LpStatus.OPTIMAL:
            # unresolved LP: the subtree cannot be certified
            self.incomplete = True
            return False
        node.dual_bound = max(node.dual_bound, sol.objective)
        if node.dual_bound >= self.primal - self._margin():
            self._event(self.global_dual())
            return False
        if not fractional_candidates(sol.x, node.problem, self.tol):
            self._new_incumbent(sol.x, float(self.instance.objective @ sol.x))
            self._event(self.global_dual())
            return False
        self._event(self.global_dual(node.dual_bound))
        return True


def solve(instance: MilpInstance, cut_policy=None, branch_policy=None,
          limits: SolveLimits | None = None, tol: Tolerances = DEFAULT_TOL,
          rng_seed: int = 0, record: bool = True) -> SolveResult:
    """Best-first branch and cut.

    ``cut_policy`` (``select_cuts``) is queried once per cut round at each
    node; None disables cutting. ``branch_policy`` (``select_branch``)
    defaults to most-fractional branching.
    """
    return _Search(instance, cut_policy, branch_policy, limits or SolveLimits(), tol,
                   rng_seed, record).run()
