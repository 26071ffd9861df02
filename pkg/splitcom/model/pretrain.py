"""
Pre-training of the frozen base on the disjoint pre-training split.
"""

import logging
import math

import numpy as np

from splitcom.kernel.rng import Rng
from splitcom.model.lora import LoraAdapterSet
from splitcom.model.optimizer import AdamW, LinearWarmupSchedule
from splitcom.model.transformer import SplitModel, init_base_weights

logger = logging.getLogger(__name__)


def pretrain_base(config, training, tokens, labels, seed):
    """Train every base weight (no adapters) for a fixed budget

    Args:
        config: ModelConfig
        training: TrainingConfig (pretrain_steps, pretrain_batch, pretrain_lr)
        tokens: [n, seq] pre-training inputs
        labels: [n, seq] next-token targets
        seed: Run seed

    Returns:
        {name: float32 array} base weights, ready to be frozen
    """
    rng = Rng(seed, 'pretrain')
    base = init_base_weights(config, Rng(seed, 'model').fork('base'))
    if training.pretrain_steps <= 0:
        return base
    model = SplitModel(config, base, LoraAdapterSet(), trainable_base=True)
    schedule = LinearWarmupSchedule(training.pretrain_lr, 0.1, training.pretrain_steps)
    opt = AdamW(schedule, training.beta1, training.beta2, training.adam_eps,
                weight_decay=0.0, clip_norm=training.clip_norm)

    tokens, labels = np.asarray(tokens), np.asarray(labels)
    n = len(tokens)
    batch = min(training.pretrain_batch, n)
    order = rng.fork('order', 0).permutation(n)
    cursor, rounds = 0, 0
    for step in range(training.pretrain_steps):
        if cursor + batch > n:
            rounds += 1
            order = rng.fork('order', rounds).permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        loss, _, base_grads = model.forward_full(tokens[idx], labels[idx])
        model.base = opt.step(model.base, base_grads)
        if step % 50 == 0 or step == training.pretrain_steps - 1:
            logger.debug("pretrain step %d loss %.4f ppl %.3f", step, loss, math.exp(loss))
    logger.info("Pre-trained base for %d steps (final batch loss %.4f)", training.pretrain_steps, loss)
    return model.base
