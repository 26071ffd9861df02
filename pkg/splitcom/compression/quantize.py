"""
Symmetric INT8 wire codec (zero point 0, round half to even).
"""

from dataclasses import dataclass

import numpy as np

from splitcom.kernel.tensor import DTYPE


@dataclass
class QuantizedTensor:
    dims: tuple
    scale: np.float32
    codes: np.ndarray

    @property
    def nbytes(self):
        return 4 + self.codes.size


def quantize_int8(x):
    """scale = max|x| / 127 (1 for an all-zero tensor); codes = round(x / scale)"""
    x = np.asarray(x, dtype=DTYPE)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = DTYPE(peak / 127.0) if peak > 0.0 else DTYPE(1.0)
    codes = np.clip(np.round(x.astype(np.float64) / np.float64(scale)), -127, 127).astype(np.int8)
    return QuantizedTensor(tuple(x.shape), scale, codes)


def dequantize(q):
    return (q.codes.astype(DTYPE) * DTYPE(q.scale)).reshape(q.dims)


def wire_roundtrip(x, enabled):
    """What the receiver will hold after the payload crosses the wire"""
    if not enabled:
        return np.asarray(x, dtype=DTYPE)
    return dequantize(quantize_int8(x))
