"""Routed vision-language-action trajectory planner on a synthetic driving world."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .model import Model, ModelConfig
from .training import EvalReport, TrainConfig, evaluate, run_schedule, run_stage

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "Model",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "parse_config",
    "run_schedule",
    "run_stage",
    "save_checkpoint",
]
