"""Multi-layer convolutional kernels on discrete signals.

Submodules: ``domain`` (grids, patches, pooling), ``dpk`` (dot-product
kernels and their sphere harmonics), ``ckmap`` (kernel evaluation),
``featoracle`` (explicit polynomial features and norm checks), ``gram``
(tiled Gram matrices), ``krr`` (ridge regression), ``theory`` (spectra,
bounds, learning curves), ``data`` (datasets and whitening), ``config``
and ``cli``.
"""

from .ckmap import ArchSpec, LayerSpec, cross_matrix, gram_matrix, kernel_eval
from .domain import Grid, PatchShape, Signal
from .dpk import DotProductKernel

__version__ = "0.1.0"

__all__ = ["ArchSpec", "LayerSpec", "Grid", "PatchShape", "Signal", "DotProductKernel",
           "kernel_eval", "gram_matrix", "cross_matrix", "__version__"]
