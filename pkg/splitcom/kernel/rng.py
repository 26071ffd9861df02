"""
Counter-based random streams.

Every stream is a numpy Philox generator keyed by a SeedSequence built from
the run seed plus a tuple of integer labels, so client, server and controller
streams can be created independently and replayed in any order.

Normal samples use the Box-Muller transform on Philox uniforms:

    u1, u2 ~ U(0, 1]
    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)

computed in float64 and rounded to float32.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_words(labels):
    """Turn stream labels (ints or strings) into unsigned 32-bit words"""
    words = []
    for label in labels:
        if isinstance(label, str):
            words.append(zlib.crc32(label.encode('utf-8')))
        else:
            value = int(label)
            if value < 0:
                raise ValueError(f"stream labels must be non-negative, got {value}")
            words.append(value & 0xFFFFFFFF)
            words.append((value >> 32) & 0xFFFFFFFF)
    return words


class Rng:
    """Single-owner random stream; do not share one instance across threads"""

    def __init__(self, seed, *stream):
        self.seed = int(seed) & _MASK64
        self.stream = tuple(stream)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32] + _label_words(self.stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def fork(self, *stream):
        """Derive an independent child stream"""
        return Rng(self.seed, *self.stream, *stream)

    def uniform(self, n):
        """n float64 uniforms in (0, 1]"""
        return 1.0 - self._gen.random(int(n))

    def gaussian(self, dims):
        """i.i.d. standard normal float32 tensor of the given dims"""
        dims = tuple(int(d) for d in dims)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        half = (n + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z.astype(np.float32).reshape(dims)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(int(n))

    def random_bool(self, p=0.5):
        return bool(self.uniform(1)[0] <= p)


def gaussian(rng, dims):
    """Standard normal tensor drawn from ``rng``"""
    return rng.gaussian(dims)
