"""Sequential recommendation with selective state-space encoders and baselines."""

from .data import SplitDataset, UserSequence, gen_synthetic, leave_one_out_split, load_cache, save_cache
from .evaluation import MetricReport, MetricSpec, evaluate
from .model import ModelConfig, SeqRecModel
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "MetricReport",
    "MetricSpec",
    "ModelConfig",
    "SeqRecModel",
    "SplitDataset",
    "TrainConfig",
    "UserSequence",
    "evaluate",
    "gen_synthetic",
    "leave_one_out_split",
    "load_cache",
    "load_model",
    "save_cache",
    "save_model",
    "train",
]
