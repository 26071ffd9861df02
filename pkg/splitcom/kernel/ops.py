"""
Differentiable kernel operations.

All shapes are checked strictly: there is no implicit broadcasting except the
explicit bias/gain forms (``add_bias``, ``layer_norm``) and the
``[..., k] x [k, n]`` form of ``linear``.
"""

import math

import numpy as np
from scipy.special import logsumexp, softmax

from splitcom.errors import ShapeError, TokenIndexError
from splitcom.kernel.tensor import DTYPE, Tensor, as_array, constant

_GELU_C = math.sqrt(2.0 / math.pi)


def _t(x):
    return x if isinstance(x, Tensor) else constant(x)


def _node(data, parents, backward):
    """Create an op output; the graph is recorded only if a parent needs it"""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} differ")


def matmul(a, b):
    """Matrix product of a [m, k] and b [k, n]"""
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), backward)


def linear(x, w):
    """x [..., k] times w [k, n] -> [..., n]"""
    x, w = _t(x), _t(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot apply {list(w.shape)} to {list(x.shape)}")
    k, n = w.shape
    out = x.data @ w.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, n)
        return gx, gw

    return _node(out, (x, w), backward)


def bmm(a, b):
    """Batched product [..., m, k] x [..., k, n] with identical leading dims"""
    a, b = _t(a), _t(b)
    if (a.data.ndim < 3 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"bmm: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _node(out, (a, b), backward)


def add(a, b):
    a, b = _t(a), _t(b)
    _check_same(a, b, "add")

    def backward(g):
        return g, g

    return _node(a.data + b.data, (a, b), backward)


def add_bias(x, bias):
    """Add a [d] vector along the last axis of x"""
    x, bias = _t(x), _t(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {list(bias.shape)} does not fit {list(x.shape)}")

    def backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _node(x.data + bias.data, (x, bias), backward)


def add_constant(x, const):
    """Add a non-differentiable array of the same dims (e.g. an attention mask)"""
    x = _t(x)
    const = as_array(const)
    if const.ndim > x.data.ndim or const.shape != x.shape[x.data.ndim - const.ndim:]:
        raise ShapeError(f"add_constant: {list(const.shape)} does not fit {list(x.shape)}")

    def backward(g):
        return (g,)

    return _node(x.data + const, (x,), backward)


def mul(a, b):
    a, b = _t(a), _t(b)
    _check_same(a, b, "mul")

    def backward(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), backward)


def scale(x, c):
    x = _t(x)
    c = float(c)

    def backward(g):
        return (g * DTYPE(c),)

    return _node(x.data * DTYPE(c), (x,), backward)


def relu(x):
    x = _t(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(x.data * mask, (x,), backward)


def gelu(x):
    """GELU, tanh approximation"""
    x = _t(x)
    v = x.data
    inner = DTYPE(_GELU_C) * (v + DTYPE(0.044715) * v * v * v)
    th = np.tanh(inner)
    out = DTYPE(0.5) * v * (DTYPE(1.0) + th)

    def backward(g):
        d_inner = DTYPE(_GELU_C) * (DTYPE(1.0) + DTYPE(3 * 0.044715) * v * v)
        local = DTYPE(0.5) * (DTYPE(1.0) + th) + DTYPE(0.5) * v * (DTYPE(1.0) - th * th) * d_inner
        return (g * local,)

    return _node(out, (x,), backward)


def sigmoid(x):
    x = _t(x)
    out = as_array(0.5 * (1.0 + np.tanh(0.5 * x.data)))

    def backward(g):
        return (g * out * (DTYPE(1.0) - out),)

    return _node(out, (x,), backward)


def reshape(x, dims):
    x = _t(x)
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: {list(x.shape)} cannot become {list(dims)}")
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _node(x.data.reshape(dims), (x,), backward)


def transpose(x, axes):
    x = _t(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def concat(tensors, axis=-1):
    tensors = [_t(t) for t in tensors]
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat: tensors differ outside the concatenation axis")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction"""
    x = _t(x)
    out = as_array(softmax(x.data, axis=-1))

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine"""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be [{d}]")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward(g):
        g_norm = g * gain.data
        gx = inv_std * (g_norm - g_norm.mean(axis=-1, keepdims=True)
                        - normed * (g_norm * normed).mean(axis=-1, keepdims=True))
        g_gain = (g * normed).reshape(-1, d).sum(axis=0)
        g_bias = g.reshape(-1, d).sum(axis=0)
        return gx, g_gain, g_bias

    return _node(out, (x, gain, bias), backward)


def embedding(ids, table):
    """Row lookup ``table[ids]``; ids is an integer array"""
    table = _t(table)
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"token index outside [0, {vocab})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), backward)


def dropout(x, keep_mask, p):
    """Inverted dropout with a precomputed boolean keep mask"""
    x = _t(x)
    if keep_mask.shape != x.shape:
        raise ShapeError("dropout: mask dims differ from input")
    factor = (keep_mask / DTYPE(1.0 - p)).astype(DTYPE)

    def backward(g):
        return (g * factor,)

    return _node(x.data * factor, (x,), backward)


def total(x):
    """Sum of all elements, as a scalar tensor"""
    x = _t(x)

    def backward(g):
        return (np.full(x.shape, g.reshape(()), dtype=DTYPE),)

    return _node(np.array(x.data.sum(), dtype=DTYPE), (x,), backward)


def mean(x):
    x = _t(x)
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / DTYPE(n), dtype=DTYPE),)

    return _node(np.array(x.data.mean(), dtype=DTYPE), (x,), backward)


def mse(pred, target):
    """Mean squared error against a constant target"""
    pred = _t(pred)
    target = as_array(target)
    _check_same(pred, constant(target), "mse")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        return (g.reshape(()) * DTYPE(2.0 / n) * diff,)

    return _node(np.array((diff * diff).mean(), dtype=DTYPE), (pred,), backward)


def _check_targets(targets, n, vocab):
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target index outside [0, {vocab})")
    return targets


def token_nll(logits, targets):
    """Per-row negative log-likelihood (no graph), float64 for reporting"""
    logits = np.asarray(logits, dtype=DTYPE)
    n, vocab = logits.shape
    targets = _check_targets(targets, n, vocab)
    lse = logsumexp(logits.astype(np.float64), axis=-1)
    return lse - logits[np.arange(n), targets].astype(np.float64)


def cross_entropy(logits, targets):
    """Mean negative log softmax probability of the targets

    Args:
        logits: Tensor [n, V]
        targets: n class indices

    Returns:
        Scalar loss tensor
    """
    logits = _t(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [n, V], got {list(logits.shape)}")
    n, vocab = logits.shape
    targets = _check_targets(targets, n, vocab)
    rows = np.arange(n)
    lse = as_array(logsumexp(logits.data, axis=-1))
    loss = np.array((lse - logits.data[rows, targets]).mean(), dtype=DTYPE)

    def backward(g):
        probs = as_array(softmax(logits.data, axis=-1))
        probs[rows, targets] -= DTYPE(1.0)
        return (probs * (g.reshape(()) / DTYPE(n)),)

    return _node(loss, (logits,), backward)
