"""Multi-decoder saliency prediction with a Swin-style backbone, in numpy."""

from .metrics import LossWeights, MetricReport, combined_loss, evaluate
from .model import ModelConfig, build_model
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "Tensor",
    "build_model",
    "combined_loss",
    "evaluate",
    "no_grad",
]
