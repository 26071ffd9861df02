"""
Desk-scale causal transformer with LoRA, partitioned at the cut layers.

Roles:
    frontend  embedding + the first ``frontend_layers`` blocks (client)
    trunk     the middle blocks (server, ushape)
    server    the middle blocks + final norm + head + loss (server, standard)
    tail      the last ``tail_layers`` blocks + final norm + head + loss (client, ushape)
    full      the whole model in one graph (reference / evaluation)
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from splitcom.errors import ModeError, ShapeError, StateError
from splitcom.kernel import ops
from splitcom.kernel.rng import Rng
from splitcom.kernel.tensor import DTYPE, Tensor, constant, leaf
from splitcom.model.lora import ADAPTED, LoraAdapterSet, adapter_names

logger = logging.getLogger(__name__)

ROLES = ('frontend', 'trunk', 'server', 'tail', 'full')
_MASK_VALUE = -1e9


def base_weight_shapes(config):
    """Names and dims of every frozen base tensor"""
    d, v = config.d_model, config.vocab_size
    shapes = {'wte': (v, d), 'wpe': (config.seq_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.q": (d, d), f"{p}.attn.k": (d, d),
            f"{p}.attn.v": (d, d), f"{p}.attn.o": (d, d),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.mlp.fc": (d, 4 * d), f"{p}.mlp.fc_bias": (4 * d,),
            f"{p}.mlp.proj": (4 * d, d), f"{p}.mlp.proj_bias": (d,),
        })
    shapes.update({'ln_f.gain': (d,), 'ln_f.bias': (d,), 'head': (d, v)})
    return shapes


def init_base_weights(config, rng):
    """Random base weights, one independent stream per tensor name"""
    d = config.d_model
    residual_std = 1.0 / math.sqrt(d) / math.sqrt(2 * config.n_layers)
    base = {}
    for name, dims in base_weight_shapes(config).items():
        if name.endswith('.gain'):
            value = np.ones(dims, dtype=DTYPE)
        elif name.endswith('bias'):
            value = np.zeros(dims, dtype=DTYPE)
        elif name in ('wte', 'wpe'):
            value = rng.fork(name).gaussian(dims) * DTYPE(0.1)
        elif name.endswith('.attn.o') or name.endswith('.mlp.proj'):
            value = rng.fork(name).gaussian(dims) * DTYPE(residual_std)
        else:
            value = rng.fork(name).gaussian(dims) * DTYPE(1.0 / math.sqrt(dims[0]))
        base[name] = value.astype(DTYPE)
    return base


def causal_mask(seq_len):
    mask = np.zeros((seq_len, seq_len), dtype=DTYPE)
    mask[np.triu_indices(seq_len, k=1)] = DTYPE(_MASK_VALUE)
    return mask


@dataclass
class SegmentResult:
    """Outcome of a segment that ends in the loss"""
    loss: float
    input_grad: np.ndarray
    adapter_grads: dict = field(default_factory=dict)
    token_count: int = 0


@dataclass
class _Record:
    inputs: Tensor
    output: Tensor
    adapters: dict


class SplitModel:
    """Frozen base weights plus LoRA adapters, split into frontend / trunk / tail"""

    def __init__(self, config, base, adapters, trainable_base=False):
        config.validate()
        self.config = config
        self.base = {}
        for name, value in base.items():
            value = np.asarray(value, dtype=DTYPE)
            if not trainable_base:
                value = value.copy() if value.flags.writeable else value
                value.flags.writeable = False
            self.base[name] = value
        self.adapters = adapters
        self.trainable_base = trainable_base
        self._records = {}
        self._mask = causal_mask(config.seq_len)

    # -- layout -------------------------------------------------------

    @property
    def mode(self):
        return 'ushape' if self.config.tail_layers > 0 else 'standard'

    def layers(self, role):
        cfg = self.config
        f, t, n = cfg.frontend_layers, cfg.tail_layers, cfg.n_layers
        if role == 'frontend':
            return range(0, f)
        if role == 'trunk':
            return range(f, n - t)
        if role == 'server':
            return range(f, n)
        if role == 'tail':
            return range(n - t, n)
        if role == 'full':
            return range(0, n)
        raise ValueError(f"unknown role {role!r}")

    def adapter_names(self, role):
        names = []
        for layer in self.layers(role):
            names.extend(adapter_names(layer))
        return names

    def client_adapter_names(self):
        """Adapters held by a client: frontend, plus tail in ushape"""
        names = self.adapter_names('frontend')
        if self.mode == 'ushape':
            names += self.adapter_names('tail')
        return names

    def server_adapter_names(self):
        return self.adapter_names('trunk' if self.mode == 'ushape' else 'server')

    def fork(self):
        """A replica sharing the frozen base, with its own adapter copy"""
        replica = SplitModel.__new__(SplitModel)
        replica.config = self.config
        replica.base = self.base
        replica.adapters = self.adapters.copy()
        replica.trainable_base = self.trainable_base
        replica._records = {}
        replica._mask = self._mask
        return replica

    def compose(self, client_adapters):
        """Global evaluation model: client-side adapters from ``client_adapters``, the rest from self"""
        composed = self.fork()
        composed.adapters.update(client_adapters.subset(self.client_adapter_names()))
        return composed

    def without_adapters(self):
        """The same base with every adapter removed"""
        replica = self.fork()
        replica.adapters = LoraAdapterSet()
        return replica

    # -- graph building -----------------------------------------------

    def _weight(self, name, cache):
        if name not in cache:
            if self.trainable_base:
                cache[name] = leaf(self.base[name], name=name)
            else:
                cache[name] = constant(self.base[name], name=name)
        return cache[name]

    def _adapter(self, name, cache):
        if name not in self.adapters:
            return None
        if name not in cache:
            cache[name] = leaf(self.adapters[name], name=name)
        return cache[name]

    def _lora_delta(self, h, layer, proj, params, rng, train):
        a = self._adapter(f"layers.{layer}.attn.{proj}.lora_A", params)
        b = self._adapter(f"layers.{layer}.attn.{proj}.lora_B", params)
        if a is None or b is None:
            return None
        p = self.config.lora_dropout
        if train and p > 0.0:
            if rng is None:
                raise StateError("training forward needs a dropout stream")
            keep = rng.uniform(h.data.size).reshape(h.shape) > p
            h = ops.dropout(h, keep, p)
        low = ops.linear(ops.linear(h, a), b)
        return ops.scale(low, self.config.lora_alpha / self.config.lora_rank)

    def _block(self, x, layer, weights, params, rng, train):
        cfg = self.config
        w = lambda name: self._weight(f"layers.{layer}.{name}", weights)
        b, s, d = x.shape
        heads, dh = cfg.n_heads, d // cfg.n_heads

        h = ops.layer_norm(x, w('ln1.gain'), w('ln1.bias'))
        projected = {}
        for proj in ('q', 'k', 'v'):
            out = ops.linear(h, w(f'attn.{proj}'))
            if proj in ADAPTED:
                delta = self._lora_delta(h, layer, proj, params, rng, train)
                if delta is not None:
                    out = ops.add(out, delta)
            projected[proj] = out
        q = ops.transpose(ops.reshape(projected['q'], (b, s, heads, dh)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(projected['k'], (b, s, heads, dh)), (0, 2, 3, 1))
        v = ops.transpose(ops.reshape(projected['v'], (b, s, heads, dh)), (0, 2, 1, 3))
        scores = ops.scale(ops.bmm(q, k), 1.0 / math.sqrt(dh))
        probs = ops.softmax_rows(ops.add_constant(scores, self._mask[:s, :s]))
        attended = ops.reshape(ops.transpose(ops.bmm(probs, v), (0, 2, 1, 3)), (b, s, d))
        x = ops.add(x, ops.linear(attended, w('attn.o')))

        h2 = ops.layer_norm(x, w('ln2.gain'), w('ln2.bias'))
        hidden = ops.gelu(ops.add_bias(ops.linear(h2, w('mlp.fc')), w('mlp.fc_bias')))
        return ops.add(x, ops.add_bias(ops.linear(hidden, w('mlp.proj')), w('mlp.proj_bias')))

    def _embed(self, tokens, weights):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] > self.config.seq_len:
            raise ShapeError(f"token batch must be [b, <= {self.config.seq_len}], got {list(tokens.shape)}")
        positions = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
        return ops.add(ops.embedding(tokens, self._weight('wte', weights)),
                       ops.embedding(positions, self._weight('wpe', weights)))

    def _head_loss(self, x, labels, weights):
        labels = np.asarray(labels)
        if labels.shape != x.shape[:2]:
            raise ShapeError(f"labels {list(labels.shape)} do not match activation {list(x.shape[:2])}")
        h = ops.layer_norm(x, self._weight('ln_f.gain', weights), self._weight('ln_f.bias', weights))
        logits = ops.linear(h, self._weight('head', weights))
        b, s, v = logits.shape
        return ops.cross_entropy(ops.reshape(logits, (b * s, v)), labels.reshape(-1)), logits

    def _check_activation(self, activation):
        activation = np.asarray(activation, dtype=DTYPE)
        expected = (self.config.seq_len, self.config.d_model)
        if activation.ndim != 3 or activation.shape[2] != expected[1] or activation.shape[1] > expected[0]:
            raise ShapeError(f"activation {list(activation.shape)} does not match the cut [b, seq, {expected[1]}]")
        return activation

    def _run_blocks(self, x, role, weights, params, rng, train):
        for layer in self.layers(role):
            x = self._block(x, layer, weights, params, rng.fork(layer) if rng else None, train)
        return x

    # -- segment operations -------------------------------------------

    def forward_frontend(self, tokens, rng=None, train=False):
        """Embedding + frontend blocks; returns the cut activation [b, seq, d_model]"""
        weights, params = {}, {}
        inputs = Tensor(np.asarray(tokens, dtype=DTYPE))
        out = self._run_blocks(self._embed(tokens, weights), 'frontend', weights, params, rng, train)
        self._records['frontend'] = _Record(inputs, out, params)
        return out.data.copy()

    def forward_trunk(self, activation, rng=None, train=False):
        """ushape server blocks; returns the trunk output with the input's dims"""
        if self.mode != 'ushape':
            raise ModeError("forward_trunk needs the ushape layout; use forward_server_with_loss")
        x = leaf(self._check_activation(activation), name='trunk_input')
        params = {}
        out = self._run_blocks(x, 'trunk', {}, params, rng, train)
        self._records['trunk'] = _Record(x, out, params)
        return out.data.copy()

    def forward_server_with_loss(self, activation, labels, rng=None, train=False):
        """Standard layout: server blocks + head + loss, then backward to the cut"""
        if self.mode != 'standard':
            raise ModeError("forward_server_with_loss needs the standard layout")
        return self._loss_segment('server', activation, labels, rng, train)

    def forward_tail_and_loss(self, trunk_activation, labels, rng=None, train=False):
        """ushape client tail: loss stays on the client; returns the gradient for the t2s uplink"""
        if self.mode != 'ushape':
            raise ModeError("forward_tail_and_loss needs the ushape layout")
        return self._loss_segment('tail', trunk_activation, labels, rng, train)

    def _loss_segment(self, role, activation, labels, rng, train):
        x = leaf(self._check_activation(activation), name=f"{role}_input")
        params, weights = {}, {}
        out = self._run_blocks(x, role, weights, params, rng, train)
        loss, _ = self._head_loss(out, labels, weights)
        self._records[role] = _Record(x, loss, params)
        grads, input_grad = self.backward_segment(role)
        return SegmentResult(loss.data.item(), input_grad, grads, int(np.asarray(labels).size))

    def backward_segment(self, role, upstream=None):
        """Backward through the recorded forward of ``role``

        Args:
            role: Segment whose forward was recorded
            upstream: Gradient w.r.t. the segment output (None for loss segments)

        Returns:
            (adapter gradients by name, gradient w.r.t. the segment input or None
            for the frontend, whose input is the embedding)
        """
        record = self._records.pop(role, None)
        if record is None:
            raise StateError(f"no recorded forward for segment {role!r}")
        if upstream is not None:
            upstream = np.asarray(upstream, dtype=DTYPE)
            if upstream.shape != record.output.shape:
                raise ShapeError(f"upstream gradient {list(upstream.shape)} != output {list(record.output.shape)}")
        for tensor in record.adapters.values():
            tensor.zero_grad()
        if record.inputs.requires_grad:
            record.inputs.zero_grad()
        if record.output._parents or record.output.requires_grad:
            record.output.backward(upstream)
        grads = {}
        for name, tensor in record.adapters.items():
            grads[name] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        input_grad = None
        if record.inputs.requires_grad:
            input_grad = record.inputs.grad
            if input_grad is None:
                input_grad = np.zeros_like(record.inputs.data)
        return grads, input_grad

    def discard_record(self, role):
        self._records.pop(role, None)

    # -- whole-model passes ---------------------------------------------

    def forward_full(self, tokens, labels, rng=None, train=False):
        """Unsplit forward + backward; returns (loss, adapter grads, base grads)"""
        weights, params = {}, {}
        x = self._run_blocks(self._embed(tokens, weights), 'full', weights, params, rng, train)
        loss, _ = self._head_loss(x, labels, weights)
        loss.backward()
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
        base_grads = {}
        if self.trainable_base:
            base_grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                          for n, t in weights.items()}
        return loss.data.item(), grads, base_grads

    def logits(self, tokens):
        """Evaluation logits [b, seq, V] without dropout or graph"""
        weights = {name: constant(value) for name, value in self.base.items()}
        params = {name: constant(value) for name, value in self.adapters.tensors.items()}
        x = self._run_blocks(self._embed(tokens, weights), 'full', weights, params, None, False)
        h = ops.layer_norm(x, self._weight('ln_f.gain', weights), self._weight('ln_f.bias', weights))
        return ops.linear(h, self._weight('head', weights)).data

    def evaluate(self, tokens, labels, batch_size=64):
        """Sum of per-token NLL and token count over a dataset"""
        tokens, labels = np.asarray(tokens), np.asarray(labels)
        nll_sum, count = 0.0, 0
        for start in range(0, len(tokens), batch_size):
            logits = self.logits(tokens[start:start + batch_size])
            b, s, v = logits.shape
            nll = ops.token_nll(logits.reshape(b * s, v), labels[start:start + batch_size].reshape(-1))
            nll_sum += float(nll.sum())
            count += nll.size
        return nll_sum, count


def build_model(config, seed, base=None):
    """Deterministic model construction

    Args:
        config: ModelConfig (validated here)
        seed: Run seed; identical seeds give bitwise-identical weights
        base: Optional pre-trained base weights to freeze instead of random ones

    Returns:
        SplitModel with zero-delta adapters
    """
    config.validate()
    rng = Rng(seed, 'model')
    if base is None:
        base = init_base_weights(config, rng.fork('base'))
    adapters = LoraAdapterSet.initialize(config, rng.fork('lora'))
    return SplitModel(config, base, adapters)


def forward_frontend(model, tokens, rng=None, train=False):
    return model.forward_frontend(tokens, rng, train)


def forward_trunk(model, activation, rng=None, train=False):
    return model.forward_trunk(activation, rng, train)


def forward_server_with_loss(model, activation, labels, rng=None, train=False):
    return model.forward_server_with_loss(activation, labels, rng, train)


def forward_tail_and_loss(model, trunk_activation, labels, rng=None, train=False):
    return model.forward_tail_and_loss(trunk_activation, labels, rng, train)


def backward_segment(model, role, upstream=None):
    return model.backward_segment(role, upstream)
