"""
Dense float32 numeric kernel: tensors, reverse-mode autodiff, seeded streams.
"""

from splitcom.kernel.rng import Rng, gaussian
from splitcom.kernel.tensor import Tensor, constant, leaf

__all__ = ['Rng', 'Tensor', 'constant', 'gaussian', 'leaf']
