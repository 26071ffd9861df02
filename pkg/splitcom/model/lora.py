"""
LoRA adapters on the query and value projections of every attention block.
"""

from collections import OrderedDict

import numpy as np

from splitcom.errors import ShapeError
from splitcom.kernel.tensor import DTYPE

ADAPTED = ('q', 'v')


def adapter_names(layer):
    """Adapter tensor names of one transformer layer, in a fixed order"""
    names = []
    for proj in ADAPTED:
        names.append(f"layers.{layer}.attn.{proj}.lora_A")
        names.append(f"layers.{layer}.attn.{proj}.lora_B")
    return names


class LoraAdapterSet:
    """Named LoRA tensors: A [d_model, r] and B [r, d_model] per adapted projection"""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict()
        for name, value in (tensors or {}).items():
            self.tensors[name] = np.array(value, dtype=DTYPE)

    @classmethod
    def initialize(cls, config, rng):
        """A ~ N(0, 1/r), B = 0, so the initial delta is exactly zero"""
        r = config.lora_rank
        std = 1.0 / np.sqrt(r)
        adapters = cls()
        for layer in range(config.n_layers):
            for name in adapter_names(layer):
                if name.endswith('lora_A'):
                    value = rng.fork(name).gaussian((config.d_model, r)) * DTYPE(std)
                else:
                    value = np.zeros((r, config.d_model), dtype=DTYPE)
                adapters.tensors[name] = value.astype(DTYPE)
        return adapters

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=DTYPE)
        if name in self.tensors and value.shape != self.tensors[name].shape:
            raise ShapeError(f"adapter {name}: dims {value.shape} != {self.tensors[name].shape}")
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def subset(self, names):
        return LoraAdapterSet({name: self.tensors[name] for name in names})

    def update(self, other):
        """Overwrite matching tensors with copies from ``other``"""
        for name, value in other.tensors.items():
            self[name] = value.copy()

    def structure(self):
        return [(name, value.shape) for name, value in self.tensors.items()]

    def copy(self):
        return LoraAdapterSet({name: value.copy() for name, value in self.tensors.items()})

    def equals(self, other):
        """Bitwise equality"""
        if self.structure() != other.structure():
            return False
        return all(self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors)

    def nbytes(self):
        return sum(value.nbytes for value in self.tensors.values())
