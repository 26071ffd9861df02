"""
Synthetic token corpus from seeded first-order Markov chains.

The fine-tuning chain is the pre-training chain plus a seeded logit shift, so
the pre-trained base is useful but not already optimal for the client data.
"""

import logging
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from splitcom.errors import ConfigError
from splitcom.kernel.rng import Rng

logger = logging.getLogger(__name__)

Split = namedtuple('Split', ['tokens', 'labels'])


class MarkovChain:
    """Row-stochastic transition matrix over the vocabulary"""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        self.vocab_size = logits.shape[0]
        self.transition = softmax(logits, axis=1)
        self._cdf = np.cumsum(self.transition, axis=1)

    def sample(self, n, length, rng):
        """n sequences of ``length`` tokens; uniform start, inverse-CDF steps"""
        seqs = np.empty((n, length), dtype=np.int64)
        seqs[:, 0] = rng.integers(0, self.vocab_size, size=n)
        for t in range(1, length):
            u = rng.uniform(n)
            rows = self._cdf[seqs[:, t - 1]]
            seqs[:, t] = np.minimum((rows < u[:, None]).sum(axis=1), self.vocab_size - 1)
        return seqs

    def stationary(self):
        values, vectors = np.linalg.eig(self.transition.T)
        pi = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
        return pi / pi.sum()

    def entropy_rate(self):
        """Nats per token of the stationary chain"""
        p = self.transition
        row_entropy = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        return float(self.stationary() @ row_entropy)


@dataclass
class SyntheticCorpus:
    seed: int
    shards: list
    val: Split
    test: Split
    pretrain: Split
    chain: MarkovChain
    base_chain: MarkovChain

    @property
    def reference_ppl(self):
        """exp(entropy rate): the best achievable validation PPL"""
        return math.exp(self.chain.entropy_rate())

    @property
    def uniform_ppl(self):
        return float(self.chain.vocab_size)


def _split(seqs):
    return Split(seqs[:, :-1], seqs[:, 1:])


def make_chains(seed, vocab_size, logit_scale=3.0, shift_scale=1.5):
    rng = Rng(seed, 'corpus')
    base = rng.fork('base').gaussian((vocab_size, vocab_size)).astype(np.float64) * logit_scale
    shift = rng.fork('shift').gaussian((vocab_size, vocab_size)).astype(np.float64) * shift_scale
    return MarkovChain(base), MarkovChain(base + shift)


def generate_corpus(seed, size, clients, seq_len=16, vocab_size=32, val_size=200, test_size=200,
                    pretrain_size=2000, logit_scale=3.0, shift_scale=1.5):
    """Deterministic corpus with an IID partition into ``clients`` shards

    Args:
        seed: Corpus seed
        size: Total training sequences (split across the shards)
        clients: Number of shards K
        seq_len: Tokens per input sequence (labels are the inputs shifted by one)

    Returns:
        SyntheticCorpus
    """
    if clients < 1 or size < clients:
        raise ConfigError(f"need at least one sequence per client (size={size}, clients={clients})")
    base_chain, chain = make_chains(seed, vocab_size, logit_scale, shift_scale)
    rng = Rng(seed, 'corpus')
    length = seq_len + 1
    train = chain.sample(size, length, rng.fork('train'))
    shards = [_split(part) for part in np.array_split(train, clients)]
    corpus = SyntheticCorpus(
        seed=seed,
        shards=shards,
        val=_split(chain.sample(val_size, length, rng.fork('val'))),
        test=_split(chain.sample(test_size, length, rng.fork('test'))),
        pretrain=_split(base_chain.sample(pretrain_size, length, rng.fork('pretrain'))),
        chain=chain,
        base_chain=base_chain)
    logger.info("Corpus seed %d: %d clients x %s sequences, reference PPL %.3f (uniform %d)",
                seed, clients, sorted({len(s.tokens) for s in shards}), corpus.reference_ppl, vocab_size)
    return corpus


def corpus_for(settings):
    c = settings.corpus
    return generate_corpus(c.seed, c.samples_per_client * settings.federation.clients,
                           settings.federation.clients, settings.model.seq_len, settings.model.vocab_size,
                           c.val_size, c.test_size, c.pretrain_size, c.logit_scale, c.shift_scale)
