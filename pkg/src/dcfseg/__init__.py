"""Competition-driven teacher / two-student semi-supervised segmentation.

Two students train by gradient descent on perturbed views; an EMA teacher is
updated each iteration from whichever student currently wins a metrics
competition on the labeled batch, and in turn mentors the one that lost.
The package bundles the training loop, baselines (plain mean teacher,
supervised-only), evaluation metrics, a synthetic dataset, diagnostics, a
CLI experiment runner and a scikit-learn style estimator facade.
"""

from .autodiff import ParamVector, ShapeError, Tape, TapeStateError, Tensor4
from .competition import CompetitionConfig, CompetitionOutcome, compete, orient
from .config import ConfigError, RunConfig, build_config
from .estimator import DCFSegmenter
from .losses import (
    LossReport,
    RampSchedule,
    ce_loss,
    cps_loss,
    dice_loss,
    harden,
    ms_loss,
    ramp_lambda,
    seg_loss,
    total_loss,
)
from .metrics import (
    MetricReport,
    UndefinedMetric,
    asd,
    ce_metric,
    dice_score,
    hd95,
    jaccard_score,
    percentile,
)
from .synthdata import Dataset, SegBatch, augment, generate_dataset
from .trainer import (
    AdamState,
    TrainerState,
    adamw_step,
    ema_update,
    train_run,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "CompetitionConfig", "CompetitionOutcome", "ConfigError",
    "DCFSegmenter", "Dataset", "LossReport", "MetricReport", "ParamVector",
    "RampSchedule", "RunConfig", "SegBatch", "ShapeError", "Tape",
    "TapeStateError", "Tensor4", "TrainerState", "UndefinedMetric",
    "adamw_step", "asd", "augment", "build_config", "ce_loss", "ce_metric",
    "compete", "cps_loss", "dice_loss", "dice_score", "ema_update",
    "generate_dataset", "harden", "hd95", "jaccard_score", "ms_loss",
    "orient", "percentile", "ramp_lambda", "seg_loss", "total_loss",
    "train_run", "train_step",
]
