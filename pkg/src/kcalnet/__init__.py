"""kcalnet: calorie regression from dish images and names.

Two regressors built on an in-package autodiff tensor core: an image-only
CNN and an image+text model with cross-modal attention fusion, plus the
data pipeline, training loop, and paired statistical comparison needed to
measure whether the text input helps.
"""

from .tensor import Tensor, backward, gradcheck
from .layers import Vectorizer, fit_vocab
from .models import (ArchConfig, Model, build_multimodal, build_unimodal,
                     load_checkpoint, micro_config, nano_config, param_count,
                     paper_scale_config, save_checkpoint)
from .data import (AugmentPolicy, DishRecord, SplitDataset, augment, load_image,
                   load_metadata, make_batches, split, synth_generate)
from .training import AdamState, TrainConfig, TrainLog, adam_step, mse_loss, train
from .stats import (ComparisonSummary, EvalReport, PredictionSet, TTestResult,
                    REFERENCE_RESULTS, compare, evaluate, paired_t_test, report,
                    scatter_emit, student_t_upper_tail)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "gradcheck",
    "Vectorizer", "fit_vocab",
    "ArchConfig", "Model", "build_multimodal", "build_unimodal",
    "load_checkpoint", "micro_config", "nano_config", "param_count",
    "paper_scale_config", "save_checkpoint",
    "AugmentPolicy", "DishRecord", "SplitDataset", "augment", "load_image",
    "load_metadata", "make_batches", "split", "synth_generate",
    "AdamState", "TrainConfig", "TrainLog", "adam_step", "mse_loss", "train",
    "ComparisonSummary", "EvalReport", "PredictionSet", "TTestResult",
    "REFERENCE_RESULTS", "compare", "evaluate", "paired_t_test", "report",
    "scatter_emit", "student_t_upper_tail",
    "__version__",
]
