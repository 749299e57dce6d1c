"""Hybrid CNN/ViT score regression with adversarial attribute debiasing, in plain numpy."""

from .autodiff import Tape, Tensor
from .data import Dataset, SyntheticSpec, generate, split
from .model import FairViT, ModelConfig, build_model
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "Tape", "Tensor", "Dataset", "SyntheticSpec", "generate", "split",
    "FairViT", "ModelConfig", "build_model", "TrainConfig", "evaluate", "train",
]
__version__ = "0.1.0"
