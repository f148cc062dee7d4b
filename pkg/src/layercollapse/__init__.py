"""Evolutionary depth compression of byte-level transformer models.

The package searches over plans that collapse runs of consecutive decoder
layers into single differentially merged layers, scoring candidates by how
closely the compressed model's activations track the original on a small
calibration set. Search comes in two flavors: a repaired single-objective
genetic algorithm for an exact compression target, and NSGA-II for the full
fitness/compression trade-off front.
"""

from .collapse import (
    MergeOp,
    ResolvedPlan,
    apply_plan,
    canonical_key,
    compression_ratio,
    decode_genome,
    genome_bounds,
    load_plan,
    merge_layers,
    plan_from_ops,
    random_genome,
    save_plan,
    similarity_map,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CalibrationError,
    CheckpointError,
    EngineError,
    InfeasibleRunError,
    InvalidTargetError,
    MissingTensorError,
    NonFiniteTensorError,
    PlanMismatchError,
    ShapeMismatchError,
)
from .evolve import (
    GAConfig,
    Individual,
    MOConfig,
    ParetoEntry,
    crowding_distance,
    dominates,
    non_dominated_sort,
    polynomial_mutation_integer,
    repair,
    run_ga,
    run_nsga2,
    sbx_integer,
)
from .fitness import (
    PENALTY_SCORE,
    CalibrationSet,
    FitnessCache,
    FitnessEvaluator,
    FitnessKind,
    SimilarityBreakdown,
    cosine,
    dataset_perplexity,
    evaluate,
    load_calibration,
    mean_kl,
    module_similarity,
    penalty_score,
)
from .model import (
    ActivationTrace,
    LayerWeights,
    ModelConfig,
    TransformerModel,
    forward,
    init_random,
    tokenize_bytes,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace",
    "CalibrationError",
    "CalibrationSet",
    "CheckpointError",
    "EngineError",
    "FitnessCache",
    "FitnessEvaluator",
    "FitnessKind",
    "GAConfig",
    "Individual",
    "InfeasibleRunError",
    "InvalidTargetError",
    "LayerWeights",
    "MergeOp",
    "MissingTensorError",
    "MOConfig",
    "ModelConfig",
    "NonFiniteTensorError",
    "ParetoEntry",
    "PENALTY_SCORE",
    "PlanMismatchError",
    "ResolvedPlan",
    "ShapeMismatchError",
    "SimilarityBreakdown",
    "TransformerModel",
    "apply_plan",
    "canonical_key",
    "compression_ratio",
    "cosine",
    "crowding_distance",
    "dataset_perplexity",
    "decode_genome",
    "dominates",
    "evaluate",
    "forward",
    "genome_bounds",
    "init_random",
    "load_calibration",
    "load_checkpoint",
    "load_plan",
    "mean_kl",
    "merge_layers",
    "module_similarity",
    "non_dominated_sort",
    "penalty_score",
    "plan_from_ops",
    "polynomial_mutation_integer",
    "random_genome",
    "repair",
    "run_ga",
    "run_nsga2",
    "save_checkpoint",
    "save_plan",
    "sbx_integer",
    "similarity_map",
    "tokenize_bytes",
]
