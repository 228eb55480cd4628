"""Continual learning with flow-based pseudo-rehearsal and embedding
regularization, plus the rehearsal/regularization baselines and the full
evaluation protocol, at desk scale."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, parse_config_text
from .data import (
    LabeledDataset,
    TaskStream,
    build_task_stream,
    load_idx,
    load_mnist,
    parse_dataset_spec,
    split_train_test,
    synth_blobs,
)
from .exceptions import ConfigurationError, DivergenceError, PrerError, StateError
from .flow import FlowStack, build_flow, nll_loss, nll_loss_and_backward
from .metrics import (
    accuracy,
    bwt,
    coverage_hausdorff,
    generation_quality,
    hausdorff_distance,
    memory_footprint,
)
from .model import ContinualModel, build_conv_model, build_mlp_model, one_hot
from .pipeline import (
    ErMemory,
    RunState,
    SyntheticMemory,
    TrainConfig,
    generate_memory,
    strategy_train_task,
    train_autoencoder_phase,
    train_classifier_phase,
    train_flow_phase,
)
from .rng import Rng
from .runner import RunRecord, aggregate, run_experiment, summary_table

__all__ = [
    "ConfigurationError",
    "ContinualModel",
    "DivergenceError",
    "ErMemory",
    "ExperimentConfig",
    "FlowStack",
    "LabeledDataset",
    "PrerError",
    "Rng",
    "RunRecord",
    "RunState",
    "StateError",
    "SyntheticMemory",
    "TaskStream",
    "TrainConfig",
    "accuracy",
    "aggregate",
    "build_conv_model",
    "build_flow",
    "build_mlp_model",
    "build_task_stream",
    "bwt",
    "coverage_hausdorff",
    "generate_memory",
    "generation_quality",
    "hausdorff_distance",
    "load_config",
    "load_idx",
    "load_mnist",
    "memory_footprint",
    "nll_loss",
    "nll_loss_and_backward",
    "one_hot",
    "parse_config_text",
    "parse_dataset_spec",
    "run_experiment",
    "split_train_test",
    "strategy_train_task",
    "summary_table",
    "synth_blobs",
    "train_autoencoder_phase",
    "train_classifier_phase",
    "train_flow_phase",
]
