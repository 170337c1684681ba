"""Adaptive multi-metric few-shot learning with auxiliary self-supervised tasks."""
from .errors import ContractViolation, NonFiniteLoss
from .fusion import FusionParams, FusionVariant
from .model import AMTNet, ModelConfig
from .training import TrainConfig, build_model, distill, train
from .episodes import EpisodeSpec, EvalReport, evaluate, sample_episode
from .data import SyntheticSpec, generate_synthetic, load_dataset, synthetic_split

__all__ = [
    "AMTNet", "ContractViolation", "EpisodeSpec", "EvalReport", "FusionParams", "FusionVariant",
    "ModelConfig", "NonFiniteLoss", "SyntheticSpec", "TrainConfig", "build_model", "distill",
    "evaluate", "generate_synthetic", "load_dataset", "sample_episode", "synthetic_split", "train",
]
__version__ = "0.1.0"
