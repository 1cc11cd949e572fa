"""Contrastive conditional neural processes on a small numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (
    FunctionFamilySpec,
    GPKernelSpec,
    LVConfig,
    LVSampler,
    MetaDataset,
    make_meta_dataset,
    sample_split,
)
from .evaluation import CoeffProbeConfig, MetricReport, coefficient_inference, evaluate
from .experiment import ExperimentConfig, load_config, run_experiment
from .model import ModelDims, build_variant, predict
from .objectives import LossWeights, fcl_loss, frl_nll, tcl_loss
from .training import Schedule, TrainConfig, train_episode, train_run

__all__ = [
    "CoeffProbeConfig",
    "ExperimentConfig",
    "FunctionFamilySpec",
    "GPKernelSpec",
    "LVConfig",
    "LVSampler",
    "LossWeights",
    "MetaDataset",
    "MetricReport",
    "ModelDims",
    "Schedule",
    "TrainConfig",
    "build_variant",
    "coefficient_inference",
    "evaluate",
    "fcl_loss",
    "frl_nll",
    "load_checkpoint",
    "load_config",
    "make_meta_dataset",
    "predict",
    "run_experiment",
    "sample_split",
    "save_checkpoint",
    "tcl_loss",
    "train_episode",
    "train_run",
]
