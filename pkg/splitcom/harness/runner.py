"""
Run orchestration: corpus, pre-trained base, session, artifacts.
"""

import logging
import math
import os
import time
from dataclasses import dataclass

from splitcom.control.controller import build_controller
from splitcom.data.corpus import corpus_for
from splitcom.data.data_manager import DataManager, metrics_row
from splitcom.errors import TransportError
from splitcom.harness.presets import preset_settings
from splitcom.model.pretrain import pretrain_base
from splitcom.model.transformer import build_model
from splitcom.protocol.audit import label_flow_audit
from splitcom.protocol.engine import Session
from splitcom.protocol.transport import Link, open_channel
from splitcom.protocol.wire import MessageType

logger = logging.getLogger(__name__)

_BASES = {}


@dataclass
class RunResult:
    run_dir: str
    reports: list
    summary: dict
    session: Session


def pretrained_base(settings, corpus):
    """Pre-trained base weights, memoized per corpus and model/pre-training settings"""
    key = (settings.corpus.seed, settings.run.seed, repr(settings.model), settings.training.pretrain_steps,
           settings.training.pretrain_batch, settings.training.pretrain_lr, len(corpus.pretrain.tokens))
    if key not in _BASES:
        _BASES[key] = pretrain_base(settings.model, settings.training, corpus.pretrain.tokens,
                                    corpus.pretrain.labels, settings.run.seed)
    return _BASES[key]


def _ratio(actual, baseline):
    return actual / baseline if baseline else 1.0


def build_summary(settings, session, reports, corpus, wall_clock_s):
    ledger = session.link.sent
    up_types = {iface.payload_type for iface in session.interfaces.values() if iface.direction == 'up'}
    bytes_up, bytes_down = ledger.total(direction='up'), ledger.total(direction='down')
    base_up = ledger.total(direction='up', baseline=True)
    base_down = ledger.total(direction='down', baseline=True)
    payload_up = ledger.total(direction='up', types=up_types)
    base_payload_up = ledger.total(direction='up', types=up_types, baseline=True)
    notices_up = ledger.total(direction='up', types={MessageType.SKIP_NOTICE, MessageType.GRADIENT_SKIP})
    audit = label_flow_audit(ledger, settings.protocol.topology)
    caches = session.cache_report()
    test_nll, test_count = session.global_model().evaluate(corpus.test.tokens, corpus.test.labels)
    final = reports[-1]
    return {
        'preset': settings.run.preset,
        'seed': settings.run.seed,
        'corpus_seed': settings.corpus.seed,
        'topology': settings.protocol.topology,
        'policy': settings.control.policy,
        'quantize_int8': settings.compression.quantize_int8,
        'epochs': len(reports),
        'comm_ratio_up': _ratio(bytes_up, base_up),
        'comm_ratio_total': _ratio(bytes_up + bytes_down, base_up + base_down),
        'payload_ratio_up': _ratio(payload_up, base_payload_up),
        'bytes_up': bytes_up,
        'bytes_down': bytes_down,
        'baseline_bytes_up': base_up,
        'baseline_bytes_down': base_down,
        'payload_bytes_up': payload_up,
        'notice_bytes_up': notices_up,
        'latency_s': sum(r.latency_s for r in reports),
        'final_train_loss': final.train_loss,
        'final_val_ppl': final.val_ppl,
        'final_client_loss': final.client_loss,
        'final_test_ppl': math.exp(test_nll / test_count),
        'reference_ppl': corpus.reference_ppl,
        'uniform_ppl': corpus.uniform_ppl,
        'theta_trace': [r.thetas for r in reports],
        'similarity_trace': [r.similarity for r in reports],
        'cache_bytes_client': caches['client'],
        'cache_bytes_server': caches['server'],
        'label_audit_passed': audit.passed,
        'label_bytes_up': audit.label_bytes_up,
        'caches_coherent': all(r.coherent for r in reports),
        'ledger_conserved': ledger.matches(session.link.received),
        'wall_clock_s': wall_clock_s,
    }


def run_settings(settings, run_dir=None, corpus=None):
    """Execute one run and write its directory

    Args:
        settings: Resolved Settings
        run_dir: Output directory; generated under ``run.out_dir`` when None
        corpus: Optional pre-built corpus for the same corpus settings

    Returns:
        RunResult
    """
    settings.update_derived()
    settings.validate()
    corpus = corpus or corpus_for(settings)
    model = build_model(settings.model, settings.run.seed, pretrained_base(settings, corpus))
    controller = build_controller(settings, settings.run.seed)
    manager = DataManager(run_dir or DataManager.generate_run_dir(settings.run.out_dir, settings.run.preset or "run"))
    manager.save_config(settings)

    link = Link(open_channel(settings.protocol.transport, settings.protocol.stream_timeout))
    session = Session(settings, corpus, model, controller, link)
    reports = []
    start = time.perf_counter()
    try:
        session.start()
        for epoch in range(1, settings.training.epochs + 1):
            reports.append(session.run_epoch(epoch))
    except TransportError as e:
        manager.write_ledger(link.sent)
        logger.error("Transport failure, ledger flushed to %s: %s", manager.run_dir, e)
        raise
    finally:
        session.close()
        link.close()
    wall_clock_s = time.perf_counter() - start if settings.run.record_wall_clock else 0.0

    manager.write_metrics([metrics_row(r) for r in reports])
    manager.write_ledger(link.sent)
    summary = build_summary(settings, session, reports, corpus, wall_clock_s)
    manager.write_summary(summary)
    if settings.run.checkpoints:
        config_text = settings.to_text()
        manager.save_checkpoint('client_adapters', session.global_client.tensors, config_text)
        manager.save_checkpoint('server_adapters',
                                session.server.models[0].adapters.subset(session.server_names).tensors, config_text)
        policy = controller.policy
        if hasattr(policy, 'save'):
            policy.save(manager.checkpoint_dir(), config_text)
    logger.info("Run written to %s (val PPL %.3f, uplink ratio %.4f)", manager.run_dir,
                summary['final_val_ppl'], summary['comm_ratio_up'])
    return RunResult(manager.run_dir, reports, summary, session)


def run_preset(name, overrides=None, run_dir=None, base=None, corpus=None):
    """Run a named preset with optional ``section.key`` overrides"""
    settings = preset_settings(name, overrides, base)
    if run_dir is None:
        run_dir = os.path.join(settings.run.out_dir, f"{name}_seed{settings.run.seed}")
    return run_settings(settings, run_dir, corpus)
