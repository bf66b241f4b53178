"""Learned policies packaged as branch-and-cut selectors."""

from __future__ import annotations

import numpy as np
import torch

from ..records import BranchAction, CutAction
from .nets import branch_policy_forward, cut_policy_forward, sample_branch_action, sample_cut_action
from .params import ParamSet


class LearnedCutSelector:
    name = "learned"

    def __init__(self, params: ParamSet, epsilon: float = 0.0, deterministic: bool = True,
                 rng: np.random.Generator | None = None):
        self.params = params
        self.epsilon = epsilon
        self.deterministic = deterministic
        self.rng = rng

    def select_cuts(self, ctx) -> CutAction:
        with torch.no_grad():
            fwd = cut_policy_forward(ctx.state(), self.params)
            return sample_cut_action(fwd, self.rng if self.rng is not None else ctx.rng,
                                     self.epsilon, self.deterministic)


class LearnedBranchSelector:
    name = "learned"

    def __init__(self, params: ParamSet, epsilon: float = 0.0, deterministic: bool = True,
                 rng: np.random.Generator | None = None):
        self.params = params
        self.epsilon = epsilon
        self.deterministic = deterministic
        self.rng = rng

    def select_branch(self, ctx) -> BranchAction:
        with torch.no_grad():
            logp = branch_policy_forward(ctx.state(), ctx.candidates, self.params)
        return sample_branch_action(logp, ctx.candidates, self.rng if self.rng is not None else ctx.rng,
                                    self.epsilon, self.deterministic)
