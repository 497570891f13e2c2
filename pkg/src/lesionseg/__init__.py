"""Lung-lesion segmentation on a small numpy autograd core."""

from .network import build_model, count_params, forward
from .tensor import GradTape, Tensor

__all__ = ["GradTape", "Tensor", "build_model", "count_params", "forward"]
__version__ = "0.1.0"
