"""segforge: a from-scratch segmentation lab comparing UNet, ENet, and BoxENet."""

from segforge.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
