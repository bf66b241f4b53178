"""Actions taken by the two agents and the per-solve trajectory that records them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CutAction:
    ratio_k: float
    selected: tuple[int, ...]
    log_prob: float = 0.0
    # pre-squash Gaussian draw behind ratio_k; None for non-learned selectors
    ratio_z: float | None = None
    source: str = "policy"

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected cut indices must be unique")


@dataclass(frozen=True)
class BranchAction:
    var: int
    log_prob: float = 0.0
    source: str = "policy"


@dataclass
class CutDecision:
    state: object  # CutState or None when the selector never built it
    action: CutAction
    clock: float
    node_id: int


@dataclass
class BranchDecision:
    state: object  # BipartiteState or None
    candidates: tuple[int, ...]
    action: BranchAction
    clock: float
    node_id: int
    scores: np.ndarray | None = None


@dataclass
class Trajectory:
    cut_decisions: list[CutDecision] = field(default_factory=list)
    branch_decisions: list[BranchDecision] = field(default_factory=list)
    # filled at termination: virtual_clock, wall_seconds, pd_gap, nodes, status
    terminal: dict = field(default_factory=dict)
