"""Multiscale Markov decision processes.

Builds hierarchies of finite MDPs by partitioning a statespace at bottleneck
states, compressing each level into a consistent coarse MDP on the bottlenecks,
solving the hierarchy top-down with alternating interior/boundary updates, and
transferring policies or potential operators between related problems.
"""

from msmdp.errors import (
    InvalidInputError,
    MsmdpError,
    NoCutError,
    NumericalError,
    ParseError,
)
from msmdp.mdp import (
    Mdp,
    bellman_backup,
    blend_policy,
    greedy_policy,
    hadamard_average,
    policy_average,
    policy_iteration,
    regularize_policy,
    restrict,
    uniform_policy,
    value_determination,
)
from msmdp.partition import Cluster, DiffusionEmbedding, Partition, spectral_partition
from msmdp.compress import CoarseMdp, PolicyPool, compress_mdp, monte_carlo_compress
from msmdp.solver import Hierarchy, SolveConfig, build_hierarchy, solve_hierarchy
from msmdp.transfer import TransferPlan, execute_transfer
from msmdp import domains

__version__ = "0.1.0"

__all__ = [
    "Mdp",
    "MsmdpError",
    "InvalidInputError",
    "NumericalError",
    "NoCutError",
    "ParseError",
    "policy_average",
    "hadamard_average",
    "value_determination",
    "bellman_backup",
    "greedy_policy",
    "blend_policy",
    "regularize_policy",
    "restrict",
    "policy_iteration",
    "uniform_policy",
    "Partition",
    "Cluster",
    "DiffusionEmbedding",
    "spectral_partition",
    "CoarseMdp",
    "PolicyPool",
    "compress_mdp",
    "monte_carlo_compress",
    "Hierarchy",
    "SolveConfig",
    "build_hierarchy",
    "solve_hierarchy",
    "TransferPlan",
    "execute_transfer",
    "domains",
]
