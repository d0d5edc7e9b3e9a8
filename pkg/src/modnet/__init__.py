"""Training neural networks under differentiable binary weight masks."""

from .artifact import (
    AnalysisReport,
    analyze,
    dot_export,
    export_subnetwork,
    load_artifact,
    load_subnetwork,
    model_from_artifact,
)
from .config import (
    apply_overrides,
    build_environments,
    default_config,
    load_config,
    render_config,
    resolve_train_config,
)
from .data import (
    Environment,
    MnistSet,
    batch_iter,
    build_colored_mnist,
    build_rotated_envs,
    load_mnist_set,
    rotate_image,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    ModnetError,
    ShapeError,
    SizeLimitError,
    TrainingError,
)
from .masking import (
    LOGIT_INIT,
    MaskedParameter,
    MaskMode,
    binarize_straight_through,
    effective_weights,
    extract_final_mask,
    mask_probability,
    sample_relaxed_mask,
)
from .models import Model, ModelConfig, build_model, l2_penalty
from .objectives import ObjectiveConfig, irm_penalty, risk_dummy_grad, total_objective
from .regularizers import (
    GroupSpec,
    RegWeights,
    build_group_spec_conv,
    build_group_spec_dense,
    build_group_spec_dense_blocks,
    reuse_penalty,
    specialization_penalty,
    total_mask_regularizer,
)
from .tensor import Tape, Tensor, finite_difference_check
from .training import Adam, MetricsRow, TrainConfig, evaluate, temperature, train, write_metrics_csv

__all__ = [
    "AnalysisReport",
    "Adam",
    "ConfigError",
    "ContractError",
    "DataError",
    "Environment",
    "FormatError",
    "GroupSpec",
    "LOGIT_INIT",
    "MaskMode",
    "MaskedParameter",
    "MetricsRow",
    "MnistSet",
    "Model",
    "ModelConfig",
    "ModnetError",
    "ObjectiveConfig",
    "RegWeights",
    "ShapeError",
    "SizeLimitError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "analyze",
    "apply_overrides",
    "batch_iter",
    "binarize_straight_through",
    "build_colored_mnist",
    "build_environments",
    "build_group_spec_conv",
    "build_group_spec_dense",
    "build_group_spec_dense_blocks",
    "build_model",
    "build_rotated_envs",
    "default_config",
    "dot_export",
    "effective_weights",
    "evaluate",
    "export_subnetwork",
    "extract_final_mask",
    "finite_difference_check",
    "irm_penalty",
    "l2_penalty",
    "load_artifact",
    "load_config",
    "load_mnist_set",
    "load_subnetwork",
    "mask_probability",
    "model_from_artifact",
    "render_config",
    "resolve_train_config",
    "reuse_penalty",
    "risk_dummy_grad",
    "rotate_image",
    "sample_relaxed_mask",
    "specialization_penalty",
    "temperature",
    "total_mask_regularizer",
    "total_objective",
    "train",
    "write_metrics_csv",
]
