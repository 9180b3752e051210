"""Cross-residual multitask networks on a minimal numpy autodiff core."""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
