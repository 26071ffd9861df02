"""
Reverse-mode autodiff on float32 numpy arrays.

A ``Tensor`` wraps an ndarray. Operations in ``splitcom.kernel.ops`` record
their parents and a backward closure; ``Tensor.backward`` walks the recorded
graph once and then releases it, so a second call without a new forward pass
is a state error.
"""

import numpy as np

from splitcom.errors import StateError

DTYPE = np.float32


def as_array(value):
    """Convert to a contiguous float32 array"""
    return np.ascontiguousarray(value, dtype=DTYPE)


class Tensor:
    """A node in the autodiff graph"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, name=None):
        self.data = as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def dims(self):
        return self.data.shape

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(dims={list(self.dims)}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        grad = as_array(grad)
        if grad.shape != self.data.shape:
            raise StateError(f"gradient shape {grad.shape} does not match {self.data.shape}")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Propagate ``grad`` (ones for a scalar) through the recorded graph

        Args:
            grad: Upstream gradient with the same dims as this tensor

        Raises:
            StateError: if no forward graph is recorded for this tensor
        """
        if self._backward is None and not self._parents:
            if not self.requires_grad:
                raise StateError("backward called without a recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not _needs_grad(parent):
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + as_array(pg)
                    else:
                        grads[id(parent)] = as_array(pg)
            node._parents = ()
            node._backward = None


def _needs_grad(node):
    return node.requires_grad or bool(node._parents)


def leaf(data, name=None):
    """A trainable leaf"""
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name=None):
    """A leaf that never receives a gradient"""
    return Tensor(data, requires_grad=False, name=name)
