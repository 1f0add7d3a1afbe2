"""Few-shot classification by feature projection.

A query image's spatial feature map is scored against each class by how
well a ridge-regularized combination of that class's pooled support
features reconstructs it; the two scalar parameters of the scoring rule
are trained with gradient descent, and the result is fused with
zero-shot vision-language probabilities.
"""

from . import errors
from .classifier import (
    FplParams,
    HyperParams,
    Prediction,
    TextFeatureBank,
    ce_loss,
    clip_scores,
    fuse,
    po_loss,
    predict,
    projection_scores,
    total_loss_and_grads,
)
from .dataio import (
    FeaturePack,
    QueryRecord,
    ShiftSpec,
    SynthSpec,
    domain_shift,
    gen_synthetic,
    pack_hash,
    read_pack,
    write_pack,
)
from .evalharness import (
    EvalReport,
    baseline_clip_zero_shot,
    baseline_nearest_class_mean,
    evaluate,
    shift_sweep,
    validate_report,
)
from .projection import (
    ClassPrototypePool,
    FeatureMap,
    Reconstruction,
    build_pool,
    feature_map,
    reconstruct,
    reconstruct_all,
)
from .tensorcore import cosine_sim, frobenius_sq, spd_solve
from .trainer import Ablation, TrainState, cosine_lr, train

__version__ = "0.1.0"

__all__ = [
    "Ablation",
    "ClassPrototypePool",
    "EvalReport",
    "FeatureMap",
    "FeaturePack",
    "FplParams",
    "HyperParams",
    "Prediction",
    "QueryRecord",
    "Reconstruction",
    "ShiftSpec",
    "SynthSpec",
    "TextFeatureBank",
    "TrainState",
    "baseline_clip_zero_shot",
    "baseline_nearest_class_mean",
    "build_pool",
    "ce_loss",
    "clip_scores",
    "cosine_lr",
    "cosine_sim",
    "domain_shift",
    "errors",
    "evaluate",
    "feature_map",
    "frobenius_sq",
    "fuse",
    "gen_synthetic",
    "pack_hash",
    "po_loss",
    "predict",
    "projection_scores",
    "read_pack",
    "reconstruct",
    "reconstruct_all",
    "shift_sweep",
    "spd_solve",
    "total_loss_and_grads",
    "train",
    "validate_report",
    "write_pack",
]
