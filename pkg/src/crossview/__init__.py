"""Cross-view masked-autoencoder pretraining on synthesized multi-view scenes."""

from .autodiff import Tensor, backward, finite_diff_grad
from .model import ModelConfig, ModelParams, init_params, preset

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad",
    "ModelConfig",
    "ModelParams",
    "init_params",
    "preset",
    "__version__",
]
