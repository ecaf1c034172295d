"""Minimal bundle-adjustment backend with targeted covariance recovery."""

from .covariance import (
    CovarianceRecovery,
    IllConditionedPairError,
    NotPositiveDefiniteError,
    SparseBackend,
    block_cholesky,
    conditional_covariance,
    marginal_covariance,
    recover_covariance_blocks,
)
from .graph import (
    FactorGraph,
    GraphError,
    Keyframe,
    Landmark,
    Observation,
    jacobians,
    read_snapshot,
    residual,
    retract_pose,
    total_cost,
    write_snapshot,
)
from .linear import (
    LinearSystem,
    ReducedSystem,
    SingularSystemError,
    linearize,
    schur_reduce,
    solve_gauss_newton,
)
from .ordering import constrained_minimum_degree, minimum_degree
from .synthetic import random_graph

__all__ = [
    "CovarianceRecovery", "FactorGraph", "GraphError", "IllConditionedPairError", "Keyframe",
    "Landmark", "LinearSystem", "NotPositiveDefiniteError", "Observation", "ReducedSystem",
    "SingularSystemError", "SparseBackend", "block_cholesky", "conditional_covariance",
    "constrained_minimum_degree", "jacobians", "linearize", "marginal_covariance",
    "minimum_degree", "random_graph", "read_snapshot", "recover_covariance_blocks", "residual",
    "retract_pose", "schur_reduce", "solve_gauss_newton", "total_cost", "write_snapshot",
]
