"""skattn: desk-scale portrait reenactment on a hand-rolled autodiff tape.

Spatial-knitting attention kernels (row-wise then column-wise attention),
pose-box and expression conditioning, zero-convolution adapters injected into
a frozen toy denoising UNet, and two-stage video generation, all on float64
numpy with exact reproducibility.
"""

from skattn import autodiff

__version__ = "0.1.0"

__all__ = ["autodiff", "__version__"]
