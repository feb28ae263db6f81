"""End-to-end-trainable Fisher vector encoding layer: diagonal GMM,
streaming mini-batch EM with bias-corrected EMA updates, set-invariant
encoding, and the exact analytic backward pass."""

from .config import VAR_FLOOR, deterministic_reductions, set_deterministic_reductions
from .data import DimensionMismatchError, FeatureBatch
from .encoding import (
    encode,
    encode_groups,
    encode_vjp,
    fv_column_names,
    fv_length,
    jacobian_analytic,
    jacobian_fd,
    normalize_fv,
)
from .gmm import (
    DiagGmm,
    EmResult,
    InitSpec,
    Responsibilities,
    em_full,
    log_component_density,
    mean_log_likelihood,
    soft_assign,
)
from .parts import ConvMapStack, FilterReport, filter_by_norm, flatten_convmaps
from .streaming import (
    EmaState,
    batch_estimates,
    bias_corrected,
    ema_update,
    init_streaming,
    streaming_step,
)
from .synth import (
    PartImage,
    SyntheticPartDataset,
    circle_centers,
    parts_to_feature_batch,
    synth_circle,
    synth_parts,
)
from .training import (
    NonFiniteLossError,
    ToyModel,
    TrainConfig,
    conventional_pipeline_oracle,
    evaluate,
    extract_features,
    fill_missing_parts,
    forward,
    gap_concat_baseline,
    gap_concat_features,
    init_toy_model,
    model_logits,
    train,
    train_linear_classifier,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
