"""Balanced collaborative multi-expert learning for long-tailed recognition."""
from ._kernels import BACKEND
from .collab import (
    NumericalAbort,
    TrainConfig,
    TrainState,
    fit,
    predict_ensemble,
    predict_single,
    train_step,
)
from .expertnet import ModelConfig, forward_expert, init_expert, load_checkpoint, save_checkpoint
from .losses import KDConfig, LossBreakdown
from .ltdata import ClassPrior, LongTailSpec, build_synthetic_lt_dataset, make_class_counts

__version__ = "0.1.0"
