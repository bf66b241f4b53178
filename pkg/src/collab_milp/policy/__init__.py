from .nets import (
    CutForward,
    GraphEmbedding,
    branch_policy_forward,
    branch_policy_forward_batch,
    canonical_cut_order,
    cut_policy_forward,
    graph_encode,
    graph_encode_batch,
    nll_loss,
    sample_branch_action,
    sample_cut_action,
    selection_probability,
)
from .optim import Adam, clip_grad_norm, sgd_adam_step
from .params import (
    DEFAULT_HIDDEN,
    FORMAT_VERSION,
    ParamFormatError,
    ParamSet,
    ParamVersionError,
    init_params,
    load_params,
    params_from_bytes,
    params_to_bytes,
    save_params,
)
from .selectors import LearnedBranchSelector, LearnedCutSelector

__all__ = [
    "Adam", "CutForward", "DEFAULT_HIDDEN", "FORMAT_VERSION", "GraphEmbedding",
    "LearnedBranchSelector", "LearnedCutSelector", "ParamFormatError", "ParamSet",
    "ParamVersionError", "branch_policy_forward", "branch_policy_forward_batch", "canonical_cut_order", "clip_grad_norm",
    "cut_policy_forward", "graph_encode", "graph_encode_batch", "init_params", "load_params", "nll_loss",
    "params_from_bytes", "params_to_bytes", "sample_branch_action", "sample_cut_action",
    "save_params", "selection_probability", "sgd_adam_step",
]
