"""Generative trajectory forecasting for sparse longitudinal 3D images.

The model learns per-frame velocity fields that transport every frame of
an irregularly sampled context sequence onto the future target volume;
integrating the learned field and reducing over frames yields the
forecast.
"""

from .sequences import (
    FilledSequence,
    ImageSequence,
    PairedFlowEndpoints,
    SequenceFormatError,
    SequenceIOError,
    SequenceShape,
    SequenceShapeError,
    SequenceTruncatedError,
    last_context_image,
    load_sequence,
    mask_sequence,
    normalize_intensities,
    replicate_target,
    save_sequence,
    sparsity_fill,
    zero_fill,
)
from .transport import FlowState, fm_loss, interpolate, sample_fm_step, true_velocity
from .model import (
    ModelConfig,
    VelocityUNet,
    fm_step_embedding,
    load_checkpoint,
    save_checkpoint,
    velocity_gradients,
)
from .integrate import (
    IntegrationError,
    SolverConfig,
    integrate,
    predict,
    predict_batch,
    temporal_reduce,
)
from .training import (
    EpochRecord,
    FitResult,
    MaskSet,
    TrainConfig,
    bernoulli_presence,
    fit,
    generate_masks,
    load_history,
    load_masks,
    method_forecasts,
    save_history,
    save_masks,
    schedule_lr,
    select_best,
    train_step_baseline,
    train_step_lci_fm,
    train_step_tfm,
    validation_scores,
)
from .metrics import (
    METRIC_FUNCTIONS,
    MetricsReport,
    SampleMetrics,
    mse,
    nrmse,
    psnr,
    read_metrics_csv,
    score_batch,
    score_prediction,
    ssim,
    write_metrics_csv,
    write_metrics_json,
)
from .synthetic import (
    DynamicsSpec,
    StaticBiasReport,
    generate_cohort,
    generate_sequence,
    noise_floor,
    oracle_target,
    patient_times,
    static_bias_report,
)
from .checkerboard import (
    CheckerboardScene,
    build_scene,
    coarse_best_prediction,
    exact_mse,
    paradox_mse_table,
)
from .config import ConfigError, ExperimentConfig, MaskSettings, SplitSizes, load_config

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
