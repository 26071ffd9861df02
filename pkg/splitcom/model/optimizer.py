"""
AdamW with global-norm clipping and a linear warm-up / linear decay schedule.

Used for the LoRA adapters, for pre-training the base, and for the DDPG
actor and critic networks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from splitcom.errors import ShapeError, TrainingError
from splitcom.kernel.tensor import DTYPE


class LinearWarmupSchedule:
    """lr rises linearly from 0 to peak over the warm-up steps, then decays linearly to 0"""

    def __init__(self, peak_lr, warmup_ratio, total_steps):
        self.peak_lr = float(peak_lr)
        self.total_steps = max(1, int(total_steps))
        self.warmup_steps = int(round(warmup_ratio * self.total_steps))

    def __call__(self, step):
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        remaining = self.total_steps - self.warmup_steps
        return self.peak_lr * max(0, self.total_steps - step) / max(1, remaining)


class ConstantSchedule:
    def __init__(self, lr):
        self.lr = float(lr)

    def __call__(self, step):
        return self.lr


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by max_norm / norm when the global norm exceeds max_norm

    Returns:
        (clipped gradients, pre-clip norm)
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return grads, norm
    factor = DTYPE(max_norm / (norm + 1e-6))
    return {name: (g * factor).astype(DTYPE) for name, g in grads.items()}, norm


@dataclass
class OptimizerState:
    """Moments and step counter for one parameter group"""
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay over a dict of named float32 arrays"""

    def __init__(self, schedule, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
                 clip_norm=1.0):
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = OptimizerState()
        self.last_norm = 0.0

    @classmethod
    def from_training(cls, training, total_steps):
        schedule = LinearWarmupSchedule(training.peak_lr, training.warmup_ratio, total_steps)
        return cls(schedule, training.beta1, training.beta2, training.adam_eps,
                   training.weight_decay, training.clip_norm)

    @property
    def lr(self):
        return self.schedule(self.state.step)

    def step(self, params, grads):
        """One clipped AdamW update

        Args:
            params: {name: array} current values (not modified)
            grads: {name: array} gradients for the same names

        Returns:
            {name: array} updated values
        """
        for name, g in grads.items():
            if name not in params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient {name}: dims {g.shape} != {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"NaN/Inf gradient for {name} at step {self.state.step}")
        if self.clip_norm is not None:
            grads, self.last_norm = clip_by_global_norm(grads, self.clip_norm)
        lr = self.lr
        t = self.state.step + 1
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        updated = dict(params)
        for name, g in grads.items():
            m = self.state.first.get(name)
            v = self.state.second.get(name)
            if m is None:
                m = np.zeros_like(g, dtype=DTYPE)
                v = np.zeros_like(g, dtype=DTYPE)
            m = (DTYPE(self.beta1) * m + DTYPE(1.0 - self.beta1) * g).astype(DTYPE)
            v = (DTYPE(self.beta2) * v + DTYPE(1.0 - self.beta2) * g * g).astype(DTYPE)
            self.state.first[name] = m
            self.state.second[name] = v
            m_hat = m / DTYPE(correction1)
            v_hat = v / DTYPE(correction2)
            p = params[name]
            p = p - DTYPE(lr * self.weight_decay) * p
            p = p - DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(self.eps))
            updated[name] = p.astype(DTYPE)
        self.state.step = t
        return updated


def optimizer_step(opt, adapters, gradients):
    """Apply one update to a LoraAdapterSet in place and return it"""
    names = list(gradients)
    new_values = opt.step({name: adapters[name] for name in names}, gradients)
    for name in names:
        adapters[name] = new_values[name]
    return adapters
