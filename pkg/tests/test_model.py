import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import assert_bitwise_equal
from splitcom.errors import ModeError, ProtocolError, ShapeError, StateError
from splitcom.kernel.rng import Rng
from splitcom.model.checkpoint import decode_container, encode_container, load_checkpoint, save_checkpoint
from splitcom.model.lora import LoraAdapterSet, adapter_names
from splitcom.model.transformer import build_model


def with_random_b(model, seed=5):
    """Non-zero LoRA B so every adapter receives a gradient"""
    rng = Rng(seed, 'b')
    for name in model.adapters.names():
        if name.endswith('lora_B'):
            model.adapters[name] = rng.fork(name).gaussian(model.adapters[name].shape) * np.float32(0.1)
    return model


@pytest.fixture
def batch(corpus):
    shard = corpus.shards[0]
    return shard.tokens[:4], shard.labels[:4]


class TestConstruction:
    def test_same_seed_same_model(self, settings):
        a, b = build_model(settings.model, 11), build_model(settings.model, 11)
        for name in a.base:
            assert_bitwise_equal(a.base[name], b.base[name])
        assert a.adapters.equals(b.adapters)

    def test_zero_delta_at_init(self, settings, batch):
        model = build_model(settings.model, 11)
        tokens, _ = batch
        np.testing.assert_array_equal(model.logits(tokens), model.without_adapters().logits(tokens))

    def test_base_is_frozen(self, settings):
        model = build_model(settings.model, 11)
        with pytest.raises(ValueError):
            model.base['wte'][0, 0] = 1.0

    def test_adapter_partition(self, settings, ushape_settings):
        for cfg in (settings.model, ushape_settings.model):
            model = build_model(cfg, 3)
            client, server = set(model.client_adapter_names()), set(model.server_adapter_names())
            assert not client & server
            assert client | server == set(model.adapters.names())
        ushape = build_model(ushape_settings.model, 3)
        assert set(adapter_names(ushape_settings.model.n_layers - 1)) <= set(ushape.client_adapter_names())

    def test_invalid_split(self, settings):
        settings.model.frontend_layers = settings.model.n_layers
        with pytest.raises(ValueError):
            build_model(settings.model, 1)


class TestSplitEqualsFull:
    def test_standard(self, settings, batch):
        model = with_random_b(build_model(settings.model, 11))
        tokens, labels = batch
        loss_full, grads_full, _ = model.forward_full(tokens, labels)

        activation = model.forward_frontend(tokens)
        result = model.forward_server_with_loss(activation, labels)
        front_grads, none = model.backward_segment('frontend', result.input_grad)
        assert none is None
        assert result.loss == pytest.approx(loss_full, rel=1e-5)
        assert result.token_count == labels.size
        split_grads = {**front_grads, **result.adapter_grads}
        assert set(split_grads) == set(grads_full)
        for name, g in grads_full.items():
            np.testing.assert_allclose(split_grads[name], g, rtol=1e-5, atol=1e-7)

    def test_ushape(self, ushape_settings, corpus):
        model = with_random_b(build_model(ushape_settings.model, 11))
        tokens, labels = corpus.shards[1].tokens[:3], corpus.shards[1].labels[:3]
        loss_full, grads_full, _ = model.forward_full(tokens, labels)

        activation = model.forward_frontend(tokens)
        trunk = model.forward_trunk(activation)
        assert trunk.shape == activation.shape
        tail = model.forward_tail_and_loss(trunk, labels)
        trunk_grads, cut_grad = model.backward_segment('trunk', tail.input_grad)
        front_grads, _ = model.backward_segment('frontend', cut_grad)
        assert tail.loss == pytest.approx(loss_full, rel=1e-5)
        split_grads = {**front_grads, **trunk_grads, **tail.adapter_grads}
        for name, g in grads_full.items():
            np.testing.assert_allclose(split_grads[name], g, rtol=1e-5, atol=1e-7)

    def test_evaluate_matches_loss(self, settings, batch):
        model = with_random_b(build_model(settings.model, 11))
        tokens, labels = batch
        nll_sum, count = model.evaluate(tokens, labels, batch_size=3)
        loss, _, _ = model.forward_full(tokens, labels)
        assert count == labels.size
        assert nll_sum / count == pytest.approx(loss, rel=1e-5)


def float64_loss(model, tokens, labels):
    """Mean next-token NLL, reduced in float64"""
    logits = model.logits(tokens).astype(np.float64)
    b, s, v = logits.shape
    logits = logits.reshape(b * s, v)
    picked = logits[np.arange(b * s), np.asarray(labels).reshape(-1)]
    return float(np.mean(logsumexp(logits, axis=-1) - picked))


def central_difference(model, name, index, tokens, labels, step=1e-3):
    original = model.adapters[name]
    points = []
    for sign in (1.0, -1.0):
        moved = original.copy()
        moved.flat[index] += np.float32(sign * step)
        model.adapters[name] = moved
        points.append((float(moved.flat[index]), float64_loss(model, tokens, labels)))
    model.adapters[name] = original
    (hi, f_hi), (lo, f_lo) = points
    return (f_hi - f_lo) / (hi - lo)


class TestFiniteDifferences:
    """Split-pass adapter gradients against centered differences of the evaluation loss"""

    def check(self, model, grads, roles, tokens, labels):
        rng = Rng(17, 'fd')
        for role in roles:
            names = model.adapter_names(role)
            for _ in range(20):
                name = names[int(rng.integers(0, len(names)))]
                index = int(rng.integers(0, model.adapters[name].size))
                analytic = float(grads[name].flat[index])
                numeric = central_difference(model, name, index, tokens, labels)
                assert np.isclose(analytic, numeric, rtol=1e-2, atol=1e-4), (role, name, index, analytic, numeric)

    def test_standard_segments(self, settings, batch):
        model = with_random_b(build_model(settings.model, 11))
        tokens, labels = batch
        result = model.forward_server_with_loss(model.forward_frontend(tokens), labels)
        front_grads, _ = model.backward_segment('frontend', result.input_grad)
        self.check(model, {**front_grads, **result.adapter_grads}, ('frontend', 'server'), tokens, labels)

    def test_ushape_segments(self, ushape_settings, corpus):
        model = with_random_b(build_model(ushape_settings.model, 11))
        tokens, labels = corpus.shards[1].tokens[:3], corpus.shards[1].labels[:3]
        tail = model.forward_tail_and_loss(model.forward_trunk(model.forward_frontend(tokens)), labels)
        trunk_grads, cut_grad = model.backward_segment('trunk', tail.input_grad)
        front_grads, _ = model.backward_segment('frontend', cut_grad)
        self.check(model, {**front_grads, **trunk_grads, **tail.adapter_grads}, ('frontend', 'trunk', 'tail'),
                   tokens, labels)


class TestSegmentErrors:
    def test_mode_errors(self, settings, ushape_settings, batch):
        tokens, labels = batch
        standard, ushape = build_model(settings.model, 1), build_model(ushape_settings.model, 1)
        activation = standard.forward_frontend(tokens)
        with pytest.raises(ModeError):
            standard.forward_trunk(activation)
        with pytest.raises(ModeError):
            ushape.forward_server_with_loss(activation, labels)

    def test_backward_without_forward(self, settings):
        with pytest.raises(StateError):
            build_model(settings.model, 1).backward_segment('frontend', np.zeros((1, 8, 16)))

    def test_upstream_dims_checked(self, settings, batch):
        model = build_model(settings.model, 1)
        model.forward_frontend(batch[0])
        with pytest.raises(ShapeError):
            model.backward_segment('frontend', np.zeros((1, 8, 16), dtype=np.float32))

    def test_activation_dims_checked(self, settings, batch):
        with pytest.raises(ShapeError):
            build_model(settings.model, 1).forward_server_with_loss(np.zeros((4, 8, 3)), batch[1])

    def test_training_forward_needs_dropout_stream(self, settings, batch):
        with pytest.raises(StateError):
            build_model(settings.model, 1).forward_frontend(batch[0], rng=None, train=True)

    def test_dropout_is_seeded(self, settings, batch):
        model = with_random_b(build_model(settings.model, 1))
        a = model.forward_frontend(batch[0], Rng(3, 'dropout'), train=True)
        b = model.forward_frontend(batch[0], Rng(3, 'dropout'), train=True)
        c = model.forward_frontend(batch[0], Rng(4, 'dropout'), train=True)
        assert_bitwise_equal(a, b)
        assert not np.array_equal(a, c)


class TestAdaptersAndCompose:
    def test_compose_takes_client_adapters(self, settings):
        server = build_model(settings.model, 1)
        clients = with_random_b(server.fork()).adapters
        composed = server.compose(clients)
        for name in server.client_adapter_names():
            assert_bitwise_equal(composed.adapters[name], clients[name])
        for name in server.server_adapter_names():
            assert_bitwise_equal(composed.adapters[name], server.adapters[name])

    def test_fork_copies_adapters(self, settings):
        model = build_model(settings.model, 1)
        replica = model.fork()
        name = model.adapters.names()[1]
        replica.adapters[name] = np.ones_like(replica.adapters[name])
        assert not np.array_equal(model.adapters[name], replica.adapters[name])
        assert replica.base is model.base

    def test_setitem_checks_dims(self, settings):
        adapters = LoraAdapterSet.initialize(settings.model, Rng(1))
        with pytest.raises(ShapeError):
            adapters[adapters.names()[0]] = np.zeros((1, 1))


class TestContainer:
    def test_roundtrip_preserves_bits_and_config(self, tmp_path, random_array):
        tensors = {'a': random_array(3, 4), 'ids': np.arange(5, dtype=np.int64)}
        path = save_checkpoint(str(tmp_path / 'x.scmd'), tensors, "model.d_model: 16\n")
        config_text, loaded = load_checkpoint(path)
        assert config_text == "model.d_model: 16\n"
        assert_bitwise_equal(loaded['a'], tensors['a'])
        assert loaded['ids'].dtype == np.int64

    def test_corrupt_blobs(self, random_array):
        blob = encode_container({'a': random_array(2, 2)})
        with pytest.raises(ProtocolError):
            decode_container(b"XXXX" + blob[4:])
        with pytest.raises(ProtocolError):
            decode_container(blob[:-3])
        with pytest.raises(ProtocolError):
            decode_container(blob + b"\0")


def test_pretraining_lowers_loss(settings, corpus, base):
    tokens, labels = corpus.pretrain
    random_model = build_model(settings.model, settings.run.seed)
    trained = build_model(settings.model, settings.run.seed, base)
    before, count = random_model.evaluate(tokens, labels)
    after, _ = trained.evaluate(tokens, labels)
    assert after / count < before / count
