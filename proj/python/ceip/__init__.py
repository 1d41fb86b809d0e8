"""RL-from-demonstrations priors: conditional affine flows, learned flow
combinations, and push-forward transition retrieval, with the experiment
pipeline behind them."""

from ._ceip import (
    AffineMap,
    ClusterAssignment,
    CombinedFlow,
    ConditionedAffineFlow,
    ConfigError,
    EvalRow,
    ExperimentConfig,
    IoError,
    MlpSpec,
    NumericError,
    PriorBundle,
    RetrievalDatabase,
    RetrievedTransition,
    RunOutcome,
    TrainConfig,
    TrainReport,
    Trajectory,
    TransitionTriple,
    UaPair,
    affine_forward,
    affine_inverse,
    affine_log_likelihood,
    build_condition_pairs,
    collect_transitions,
    config_hash,
    derive_seed,
    flow_nll,
    kmeans_cluster,
    load_trajectories,
    make_condition,
    make_pairs,
    run_hash,
    run_pipeline,
    variant_names,
)

__all__ = [
    "AffineMap",
    "ClusterAssignment",
    "CombinedFlow",
    "ConditionedAffineFlow",
    "ConfigError",
    "EvalRow",
    "ExperimentConfig",
    "IoError",
    "MlpSpec",
    "NumericError",
    "PriorBundle",
    "RetrievalDatabase",
    "RetrievedTransition",
    "RunOutcome",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "TransitionTriple",
    "UaPair",
    "affine_forward",
    "affine_inverse",
    "affine_log_likelihood",
    "build_condition_pairs",
    "collect_transitions",
    "config_hash",
    "derive_seed",
    "flow_nll",
    "kmeans_cluster",
    "load_trajectories",
    "make_condition",
    "make_pairs",
    "run_hash",
    "run_pipeline",
    "variant_names",
]

__version__ = "0.1.0"
