"""Prompted temporal adaptation of frozen image-language encoders for video class-incremental learning."""

from .core import (
    AccuracyMatrix, ConfigError, ContractError, Dims, ExperimentConfig, PromptSet, ReplayMemory,
    TaskSpec, TextClassBank, VideoSample, prompt_param_count, split_into_tasks,
)
from .encoders import SyntheticEncoderSuite
from .harness import ResultRecord, compute_acc, compute_bwf, emit_report, run_experiment
from .temporal import TemporalEncoder

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "ConfigError", "ContractError", "Dims", "ExperimentConfig", "PromptSet",
    "ReplayMemory", "ResultRecord", "SyntheticEncoderSuite", "TaskSpec", "TemporalEncoder",
    "TextClassBank", "VideoSample", "compute_acc", "compute_bwf", "emit_report",
    "prompt_param_count", "run_experiment", "split_into_tasks",
]
