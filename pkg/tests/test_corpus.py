import math

import numpy as np
import pytest

from conftest import assert_bitwise_equal
from splitcom.data.corpus import MarkovChain, generate_corpus, make_chains
from splitcom.errors import ConfigError
from splitcom.kernel.rng import Rng


@pytest.fixture
def corpus():
    return generate_corpus(11, size=30, clients=3, seq_len=6, vocab_size=8, val_size=10, test_size=5,
                           pretrain_size=20)


def test_shapes_and_partition(corpus):
    assert [len(s.tokens) for s in corpus.shards] == [10, 10, 10]
    assert corpus.shards[0].tokens.shape == (10, 6)
    assert corpus.val.tokens.shape == (10, 6)
    assert corpus.test.tokens.shape == (5, 6)
    assert corpus.pretrain.tokens.shape == (20, 6)
    assert corpus.shards[0].tokens.max() < 8


def test_labels_are_next_tokens(corpus):
    shard = corpus.shards[1]
    np.testing.assert_array_equal(shard.labels[:, :-1], shard.tokens[:, 1:])


def test_deterministic(corpus):
    again = generate_corpus(11, size=30, clients=3, seq_len=6, vocab_size=8, val_size=10, test_size=5,
                            pretrain_size=20)
    for a, b in zip(corpus.shards, again.shards):
        assert_bitwise_equal(a.tokens, b.tokens)
    other = generate_corpus(12, size=30, clients=3, seq_len=6, vocab_size=8, val_size=10, test_size=5,
                            pretrain_size=20)
    assert not np.array_equal(corpus.shards[0].tokens, other.shards[0].tokens)


def test_uneven_shards():
    corpus = generate_corpus(1, size=7, clients=3, seq_len=4, vocab_size=4, val_size=2, test_size=2,
                             pretrain_size=2)
    assert [len(s.tokens) for s in corpus.shards] == [3, 2, 2]


def test_more_clients_than_samples():
    with pytest.raises(ConfigError):
        generate_corpus(1, size=2, clients=3)


class TestMarkovChain:
    def test_rows_are_distributions(self):
        base, shifted = make_chains(5, 6)
        for chain in (base, shifted):
            np.testing.assert_allclose(chain.transition.sum(axis=1), 1.0)
        assert not np.allclose(base.transition, shifted.transition)

    def test_samples_follow_transitions(self):
        chain = MarkovChain(np.log(np.array([[0.9, 0.1], [0.2, 0.8]])))
        seqs = chain.sample(400, 30, Rng(2))
        pairs = np.stack([seqs[:, :-1].ravel(), seqs[:, 1:].ravel()])
        from_zero = pairs[1][pairs[0] == 0]
        assert (from_zero == 0).mean() == pytest.approx(0.9, abs=0.02)

    def test_reference_perplexity(self):
        uniform = MarkovChain(np.zeros((4, 4)))
        assert uniform.entropy_rate() == pytest.approx(math.log(4))
        deterministic = MarkovChain(np.array([[0.0, 50.0], [50.0, 0.0]]))
        assert deterministic.entropy_rate() == pytest.approx(0.0, abs=1e-6)

    def test_corpus_reference_below_uniform(self, corpus):
        assert 1.0 < corpus.reference_ppl < corpus.uniform_ppl == 8.0
