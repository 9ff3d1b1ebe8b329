"""Prototype refinement for few-shot anomaly detection on feature tensors.

The pipeline: flatten backbone features, compress support features into a
prototype bank by farthest-first subsampling, refine the bank per query by
alternating a closed-form reconstruction transform with entropic
optimal-transport anomaly suppression, then score each patch by its distance
to the nearest refined prototype.
"""

from .coreset import CoresetConfig, coreset_size, select_coreset
from .errors import (
    DegenerateKernelError,
    FastrefError,
    InvalidInputError,
    NonConvergenceError,
    NonFiniteError,
    SingularMatrixError,
    TensorFormatError,
    UndefinedMetricError,
    UnsupportedSizeError,
)
from .eval import BenchReport, LabeledScores, SynthInstance, auroc, bench_refine, synth_generate
from .ot import (
    COSINE_DIST,
    SQ_EUCLIDEAN,
    CostMatrix,
    SinkhornConfig,
    TransportPlan,
    auto_epsilon,
    cost_matrix,
    exact_ot_small,
    sinkhorn,
)
from .refine import (
    BankGram,
    RefineConfig,
    RefineResult,
    RefineTrace,
    ScoredQuery,
    TransformMatrix,
    default_lambda,
    fastref_refine,
    init_transform,
    objective_value,
    refine_and_score,
    ttt_refine,
    update_transform,
)
from .scoring import (
    ScoreMap,
    combine_zero_shot,
    gaussian_smooth,
    image_score,
    score_map,
    upsample_bilinear,
)
from .tensor_io import (
    COSINE,
    EUCLIDEAN,
    FeatureMap,
    FlatFeatures,
    ManifestEntry,
    PrototypeBank,
    flatten_map,
    read_manifest,
    read_tensor,
    reshape_flat,
    write_manifest,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "BankGram",
    "BenchReport",
    "COSINE",
    "COSINE_DIST",
    "CoresetConfig",
    "CostMatrix",
    "DegenerateKernelError",
    "EUCLIDEAN",
    "FastrefError",
    "FeatureMap",
    "FlatFeatures",
    "InvalidInputError",
    "LabeledScores",
    "ManifestEntry",
    "NonConvergenceError",
    "NonFiniteError",
    "PrototypeBank",
    "RefineConfig",
    "RefineResult",
    "RefineTrace",
    "SQ_EUCLIDEAN",
    "ScoreMap",
    "ScoredQuery",
    "SingularMatrixError",
    "SinkhornConfig",
    "SynthInstance",
    "TensorFormatError",
    "TransformMatrix",
    "TransportPlan",
    "UndefinedMetricError",
    "UnsupportedSizeError",
    "auroc",
    "auto_epsilon",
    "bench_refine",
    "combine_zero_shot",
    "coreset_size",
    "cost_matrix",
    "default_lambda",
    "exact_ot_small",
    "fastref_refine",
    "flatten_map",
    "gaussian_smooth",
    "image_score",
    "init_transform",
    "objective_value",
    "read_manifest",
    "read_tensor",
    "refine_and_score",
    "reshape_flat",
    "score_map",
    "select_coreset",
    "sinkhorn",
    "synth_generate",
    "ttt_refine",
    "update_transform",
    "upsample_bilinear",
    "write_manifest",
    "write_tensor",
]
