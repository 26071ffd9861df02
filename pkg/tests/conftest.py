import numpy as np
import pytest

from splitcom.config.settings import Settings
from splitcom.data.corpus import corpus_for
from splitcom.kernel.rng import Rng
from splitcom.model.pretrain import pretrain_base

# Small enough that a full session runs in a few seconds
SMALL = {
    'model.vocab_size': 16,
    'model.d_model': 16,
    'model.n_heads': 2,
    'model.n_layers': 3,
    'model.seq_len': 8,
    'model.lora_rank': 4,
    'training.epochs': 3,
    'training.batch_size': 4,
    'training.pretrain_steps': 20,
    'training.pretrain_batch': 8,
    'federation.clients': 2,
    'corpus.samples_per_client': 8,
    'corpus.val_size': 16,
    'corpus.test_size': 8,
    'corpus.pretrain_size': 64,
    'ddpg.hidden1': 16,
    'ddpg.hidden2': 8,
    'ddpg.minibatch': 2,
    'run.record_wall_clock': False,
    'run.checkpoints': False,
}


def small_settings(**overrides):
    """Settings with the SMALL sizes; keyword keys use '__' for '.'"""
    settings = Settings().apply_overrides(SMALL)
    settings.apply_overrides({key.replace('__', '.'): value for key, value in overrides.items()})
    return settings.validate()


@pytest.fixture
def settings():
    return small_settings()


@pytest.fixture
def ushape_settings():
    return small_settings(protocol__topology='ushape')


@pytest.fixture
def corpus(settings):
    return corpus_for(settings)


@pytest.fixture
def base(settings, corpus):
    return pretrain_base(settings.model, settings.training, corpus.pretrain.tokens,
                         corpus.pretrain.labels, settings.run.seed)


@pytest.fixture
def rng():
    return Rng(1234, 'test')


@pytest.fixture
def random_array(rng):
    def make(*dims):
        return rng.fork('array', *dims).gaussian(dims)
    return make


def assert_bitwise_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert a.tobytes() == b.tobytes()
