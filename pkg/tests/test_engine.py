import numpy as np
import pytest

from conftest import small_settings
from splitcom.compression.cache import ReuseCache
from splitcom.compression.projection import IdentityProjection
from splitcom.control.controller import build_controller
from splitcom.data.corpus import corpus_for
from splitcom.errors import ModeError, ProtocolError
from splitcom.model.transformer import build_model
from splitcom.protocol.audit import label_flow_audit
from splitcom.protocol.engine import (
    GatedInterface, Session, assemble_server_batch, batch_ids, gradient_return, shuffle_order)
from splitcom.protocol.reference import reference_run
from splitcom.protocol.transport import InProcChannel, Link
from splitcom.protocol.wire import MessageType

ACT = {MessageType.ACTIVATION_UPLOAD}


def run_session(settings, epochs=None):
    corpus = corpus_for(settings)
    model = build_model(settings.model, settings.run.seed)
    session = Session(settings, corpus, model, build_controller(settings, settings.run.seed), Link(InProcChannel()))
    session.start()
    try:
        reports = [session.run_epoch(e) for e in range(1, (epochs or settings.training.epochs) + 1)]
    finally:
        session.close()
    return session, reports


def client_adapters(session):
    return [c.model.adapters.subset(session.client_names) for c in session.clients]


class TestHelpers:
    def test_shuffle_is_seeded_per_epoch_and_client(self):
        assert np.array_equal(shuffle_order(7, 2, 1, 10), shuffle_order(7, 2, 1, 10))
        assert not np.array_equal(shuffle_order(7, 2, 1, 10), shuffle_order(7, 3, 1, 10))
        assert sorted(shuffle_order(7, 2, 1, 10)) == list(range(10))

    def test_last_batch_may_be_short(self):
        assert batch_ids(np.arange(10), 2, 4) == [8, 9]
        assert batch_ids(np.arange(10), 3, 4) == []

    def test_reuse_without_entry(self):
        with pytest.raises(ProtocolError):
            assemble_server_batch({}, ReuseCache(), [3])

    def test_gradient_return_reuses_cached_rows(self, random_array):
        iface = GatedInterface('s2f', 'bidirectional', IdentityProjection(6, 's2f'), False, True)
        link = Link(InProcChannel())
        grads = random_array(3, 2, 3)
        got, plan = gradient_return(iface, link, 0, 1, 0, [4, 5, 6], grads, 0.99, True)
        assert plan.send.all()
        np.testing.assert_array_equal(got, grads)
        got, plan = gradient_return(iface, link, 0, 2, 0, [6, 4, 5], grads[[2, 0, 1]], 0.99, False)
        assert not plan.send.any()
        np.testing.assert_array_equal(got, grads[[2, 0, 1]])
        assert link.sent.count(types={MessageType.GRADIENT_DOWN}) == 1
        assert link.sent.count(direction='down', types={MessageType.GRADIENT_SKIP}) == 1
        assert link.sent.total(types={MessageType.GRADIENT_DOWN}, baseline=True) == \
            2 * link.sent.total(types={MessageType.GRADIENT_DOWN})


def test_fp32_no_reuse_matches_monolithic_loop():
    settings = small_settings(control__theta=1.01)
    session, _ = run_session(settings)
    reference = reference_run(settings, corpus_for(settings), build_model(settings.model, settings.run.seed))
    for ours, theirs in zip(client_adapters(session), reference.client_adapters):
        assert ours.equals(theirs.subset(session.client_names))
    server = session.server.models[0].adapters.subset(session.server_names)
    assert server.equals(reference.server_adapters.subset(session.server_names))


def test_reference_loop_rejects_ushape():
    settings = small_settings(protocol__topology='ushape')
    with pytest.raises(ModeError):
        reference_run(settings, corpus_for(settings), build_model(settings.model, 1))


class TestGateArithmetic:
    def test_always_reuse_after_cold_start(self):
        settings = small_settings(control__theta=-1.01)
        session, reports = run_session(settings)
        ledger = session.link.sent
        samples = settings.corpus.samples_per_client * settings.federation.clients
        steps = settings.steps_per_epoch * settings.federation.clients
        assert reports[0].sends_up == samples
        for epoch, report in enumerate(reports[1:], start=2):
            assert ledger.total(direction='up', epoch=epoch, types=ACT) == 0
            assert ledger.count(epoch=epoch, types={MessageType.SKIP_NOTICE}) == steps
            assert (report.sends_up, report.reuses_up) == (0, samples)
        # uplink activation bytes are exactly 1/T of the fp32 baseline
        epochs = settings.training.epochs
        assert ledger.total(types=ACT) * epochs == ledger.total(types=ACT, baseline=True)
        assert all(r.coherent for r in reports)

    def test_always_send(self):
        session, reports = run_session(small_settings(control__theta=1.01))
        ledger = session.link.sent
        assert ledger.count(types={MessageType.SKIP_NOTICE}) == 0
        assert ledger.total(types=ACT) == ledger.total(types=ACT, baseline=True)
        assert all(r.reuses_up == 0 for r in reports)

    def test_similarity_reported_after_first_epoch(self):
        _, reports = run_session(small_settings(control__theta=0.5))
        assert reports[0].similarity['f2s'] is None
        assert -1.0 <= reports[1].similarity['f2s'] <= 1.0

    def test_standard_gradients_are_never_gated(self):
        settings = small_settings(control__theta=-1.01)
        session, _ = run_session(settings)
        steps = settings.steps_per_epoch * settings.federation.clients
        assert session.link.sent.count(epoch=3, types={MessageType.GRADIENT_DOWN}) == steps
        assert session.link.sent.count(types={MessageType.GRADIENT_SKIP}) == 0

    def test_bidirectional_gradient_reuse(self):
        settings = small_settings(protocol__topology='bidirectional', control__theta_overrides='s2f=-1.01',
                                  control__theta=1.01)
        session, reports = run_session(settings)
        ledger = session.link.sent
        steps = settings.steps_per_epoch * settings.federation.clients
        assert ledger.count(epoch=2, types={MessageType.GRADIENT_DOWN}) == 0
        assert ledger.count(epoch=2, types={MessageType.GRADIENT_SKIP}) == steps
        assert ledger.count(epoch=2, types=ACT) == steps
        assert reports[-1].reuses['s2f'] > 0

    def test_sends_fall_as_threshold_falls(self):
        # a hot learning rate moves the cut activations enough between epochs
        # that similarities spread well below 1
        fast = {'training__peak_lr': 0.05, 'training__warmup_ratio': 0.0, 'training__epochs': 4,
                'compression__similarity_space': 'full'}
        thetas = [1.01, 0.99999, 0.9999, 0.999, 0.99, 0.95, 0.9, -1.01]
        sends = []
        for theta in thetas:
            settings = small_settings(control__theta=theta, **fast)
            _, reports = run_session(settings)
            sends.append([r.sends_up for r in reports])
        samples = settings.corpus.samples_per_client * settings.federation.clients
        totals = [sum(s) for s in sends]
        assert totals[0] == samples * 4 and totals[-1] == samples
        assert all(a >= b for a, b in zip(totals, totals[1:])), totals
        assert any(samples < t < samples * 4 for t in totals), totals
        assert all(s[0] == samples for s in sends)

    @pytest.mark.parametrize('topology', ['standard', 'bidirectional', 'ushape'])
    def test_int8_caches_stay_coherent_with_reuse(self, topology):
        settings = small_settings(protocol__topology=topology, compression__quantize_int8=True, control__theta=0.9)
        session, reports = run_session(settings)
        assert all(r.coherent for r in reports)
        assert sum(sum(r.reuses.values()) for r in reports) > 0
        assert session.link.sent.matches(session.link.received)

    def test_disabled_compression_sends_everything(self):
        session, reports = run_session(small_settings(control__theta=-1.01, compression__enabled=False))
        assert session.gated == ()
        assert session.link.sent.count(types={MessageType.SKIP_NOTICE}) == 0
        assert reports[-1].thetas == {}


class TestLabelFlow:
    def test_standard_sends_labels_once(self):
        session, _ = run_session(small_settings())
        ledger = session.link.sent
        assert ledger.label_bytes('up') > 0
        assert ledger.count(epoch=2, types={MessageType.LABEL_BLOCK}) == 0
        assert label_flow_audit(ledger, 'standard').label_bytes_up == ledger.label_bytes('up')

    def test_ushape_keeps_labels_on_clients(self):
        session, reports = run_session(small_settings(protocol__topology='ushape'))
        ledger = session.link.sent
        assert ledger.count(types={MessageType.LABEL_BLOCK}) == 0
        assert label_flow_audit(ledger, 'ushape').passed
        assert ledger.count(direction='up', types={MessageType.EVAL_REPORT}) == 2 * 3
        assert ledger.count(types={MessageType.TRUNK_ACTIVATION_DOWN}) > 0
        assert ledger.count(types={MessageType.TAIL_GRADIENT_UP}) > 0
        assert all(np.isfinite(r.client_loss).all() for r in reports)


class TestSession:
    def test_ledgers_conserved(self):
        session, _ = run_session(small_settings(protocol__topology='ushape', control__theta=0.9))
        assert session.link.sent.matches(session.link.received)

    def test_hello_sent_to_every_client(self):
        session, _ = run_session(small_settings(), epochs=1)
        assert session.link.sent.count(epoch=0, types={MessageType.SESSION_HELLO}) == 2

    def test_concurrent_matches_sequential(self):
        a, ra = run_session(small_settings(control__theta=0.9))
        b, rb = run_session(small_settings(control__theta=0.9, protocol__concurrent=True))
        assert a.link.sent.rows() == b.link.sent.rows()
        for x, y in zip(client_adapters(a), client_adapters(b)):
            assert x.equals(y)
        assert [r.val_ppl for r in ra] == [r.val_ppl for r in rb]

    def test_int8_shrinks_uplink_payloads(self):
        session, _ = run_session(small_settings(control__theta=1.01, compression__quantize_int8=True), epochs=1)
        ledger = session.link.sent
        assert ledger.total(types=ACT) < 0.3 * ledger.total(types=ACT, baseline=True)

    def test_aggregation_synchronizes_clients(self):
        session, _ = run_session(small_settings(control__theta=0.9), epochs=2)
        first, second = client_adapters(session)
        assert first.equals(second)
        assert first.equals(session.global_client)

    def test_aggregation_interval(self):
        settings = small_settings(federation__interval=1)
        session, _ = run_session(settings, epochs=1)
        rounds = session.link.sent.count(types={MessageType.ADAPTER_BROADCAST}) // settings.federation.clients
        assert rounds == settings.steps_per_epoch

    @pytest.mark.parametrize('overrides', [
        {'training__reused_backward': 'freeze', 'control__theta': -1.01},
        {'federation__server_adapters': 'per_stream'},
        {'compression__similarity_space': 'full'},
        {'protocol__topology': 'ushape', 'training__reused_backward': 'freeze', 'control__theta': 0.9},
    ])
    def test_variants_train(self, overrides):
        _, reports = run_session(small_settings(**overrides))
        assert all(np.isfinite(r.val_ppl) for r in reports)
        assert all(r.coherent for r in reports)

    def test_freeze_skips_updates_when_everything_is_reused(self):
        session, _ = run_session(small_settings(training__reused_backward='freeze', control__theta=-1.01))
        assert all(c.optimizer.state.step == session.steps_per_epoch for c in session.clients)
