"""Branch-and-cut MILP solver with a learned cut-selection policy and a learned
branching policy trained in two phases (pretraining, then joint finetuning)."""

from .bnc import (
    SolveLimits,
    SolveResult,
    SolveStatus,
    pd_gap,
    pd_integral,
    solve,
)
from .cuts import Cut, CutPool, apply_cuts, generate_gomory_cuts, validate_cut
from .features import BipartiteState, CutState, extract_bipartite, extract_cut_state
from .instances import (
    gen_cfl,
    gen_comb_auction,
    gen_mis,
    gen_set_covering,
    read_instance,
    write_instance,
)
from .milp import MilpInstance, Tolerances
from .simplex import LpSolution, LpStatus, solve_lp

__version__ = "0.1.0"

__all__ = [
    "BipartiteState", "Cut", "CutPool", "CutState", "LpSolution", "LpStatus", "MilpInstance",
    "SolveLimits", "SolveResult", "SolveStatus", "Tolerances", "apply_cuts",
    "extract_bipartite", "extract_cut_state", "gen_cfl", "gen_comb_auction", "gen_mis",
    "gen_set_covering", "generate_gomory_cuts", "pd_gap", "pd_integral", "read_instance",
    "solve", "solve_lp", "validate_cut", "write_instance",
]
