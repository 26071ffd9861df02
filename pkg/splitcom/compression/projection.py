"""
Random projection of per-sample cut tensors and cosine similarity.
"""

import numpy as np

from splitcom.errors import ShapeError
from splitcom.kernel.rng import Rng
from splitcom.kernel.tensor import DTYPE


def cosine(x, y):
    """Cosine similarity clamped to [-1, 1]; two zero vectors give 0"""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"cosine: lengths {x.size} and {y.size} differ")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


class ProjectionMatrix:
    """P [d_in, d_out] with N(0, 1/d_out) entries, fixed for one (interface, run)"""

    def __init__(self, d_in, d_out, seed, interface):
        if d_in < 1 or d_out < 1:
            raise ShapeError("projection dims must be >= 1")
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.seed = int(seed)
        self.interface = interface
        rng = Rng(seed, 'projection', interface)
        self.matrix = (rng.gaussian((self.d_in, self.d_out)) * DTYPE(1.0 / np.sqrt(self.d_out))).astype(DTYPE)
        self.matrix.flags.writeable = False

    def project(self, x):
        flat = np.asarray(x, dtype=DTYPE).reshape(-1)
        if flat.size != self.d_in:
            raise ShapeError(f"project: input of {flat.size} values, expected {self.d_in}")
        return flat @ self.matrix


class IdentityProjection:
    """Similarity on the full flattened tensor"""

    def __init__(self, d_in, interface=None):
        self.d_in = self.d_out = int(d_in)
        self.interface = interface

    def project(self, x):
        flat = np.asarray(x, dtype=DTYPE).reshape(-1)
        if flat.size != self.d_in:
            raise ShapeError(f"project: input of {flat.size} values, expected {self.d_in}")
        return flat.copy()


def project(p, x):
    return p.project(x)


def make_projection(settings, interface, seed):
    """Comparison projection for one interface, per the similarity space setting"""
    if settings.compression.similarity_space == 'full':
        return IdentityProjection(settings.cut_dim, interface)
    return ProjectionMatrix(settings.cut_dim, settings.projection_dim, seed, interface)
