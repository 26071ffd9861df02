"""
Split-federated training engine.

One server and K clients exchange cut tensors through a Link. Every step runs
in three phases, clients in ascending id order within each phase:

    1. client frontend forward and f2s gating        (parallel in concurrent mode)
    2. server work per client: labels, uploads, server segment, ushape tail
       round-trip, gradient return                   (always sequential)
    3. client frontend backward and optimizer step   (parallel in concurrent mode)

Frames are only emitted in phase 2, so the ledger does not depend on the
scheduling mode.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from splitcom.compression.cache import (
    CacheKey, ComparisonCache, ReuseCache, cache_memory_report, check_coherence, commit_transmission, gate)
from splitcom.compression.projection import make_projection
from splitcom.control.state import EpochFeedback
from splitcom.errors import ProtocolError
from splitcom.federation.aggregate import broadcast, client_weights, decode_adapters, encode_adapters, fedavg
from splitcom.kernel.rng import Rng
from splitcom.kernel.tensor import DTYPE
from splitcom.model.optimizer import AdamW, optimizer_step
from splitcom.protocol.ledger import estimate_latency
from splitcom.protocol.wire import (
    Frame, MessageType, decode_eval_report, decode_hello, decode_samples, decode_skip, direction_of,
    encode_eval_report, encode_hello, encode_samples, encode_skip, payload_type, samples_payload_size,
    skip_type)

logger = logging.getLogger(__name__)


def batch_ids(order, step, batch_size):
    return [int(i) for i in order[step * batch_size:(step + 1) * batch_size]]


def shuffle_order(seed, epoch, client_id, n):
    return Rng(seed, 'shuffle', epoch, client_id).permutation(n)


def dropout_stream(seed, epoch, step, client_id):
    return Rng(seed, 'dropout', epoch, step, client_id)


def assemble_server_batch(uploads, reuse_cache, sample_ids, client_id=0, interface='f2s'):
    """Batch rows in ``sample_ids`` order, each from an upload or the reuse cache

    Args:
        uploads: {sample_id: tensor row} received this step
        reuse_cache: ReuseCache of the receiving party
        sample_ids: Batch order
    """
    rows = []
    for sid in sample_ids:
        row = uploads.get(sid)
        if row is None:
            row = reuse_cache.lookup(CacheKey(client_id, sid, interface))
        rows.append(row)
    return np.stack(rows).astype(DTYPE)


@dataclass
class GatePlan:
    send: np.ndarray
    similarities: list = field(default_factory=list)


class GatedInterface:
    """Sender comparison cache, receiver reuse cache and projection of one interface"""

    def __init__(self, name, topology, projection, quantize, gated):
        self.name = name
        self.projection = projection
        self.quantize = quantize
        self.gated = gated
        self.sender = ComparisonCache()
        self.receiver = ReuseCache()
        self.payload_type = payload_type(name, topology)
        self.skip_type = skip_type(name)
        self.direction = direction_of(name)

    def decide(self, client_id, sample_ids, tensor, theta, cold_start):
        """Per-sample gate decisions for one batch (sender side)"""
        if not self.gated:
            return GatePlan(np.ones(len(sample_ids), dtype=bool))
        send, sims = [], []
        for row, sid in zip(tensor, sample_ids):
            compressed = self.projection.project(row)
            decision = gate(self.sender, CacheKey(client_id, sid, self.name), compressed, theta, cold_start)
            send.append(decision.send)
            sims.append(decision.similarity)
        return GatePlan(np.array(send, dtype=bool), sims)

    def transmit(self, link, client_id, epoch, step, sample_ids, tensor, plan):
        """Send the gated rows (plus a skip notice) and return the receiver's batch"""
        row_dims = tensor.shape[1:]
        link.sent.record_baseline(epoch, self.direction, self.payload_type,
                                  samples_payload_size(len(sample_ids), row_dims), self.name)
        uploads = {}
        sent_ids = [sid for sid, s in zip(sample_ids, plan.send) if s]
        if sent_ids:
            payload = encode_samples(sent_ids, tensor[plan.send], self.quantize)
            frame = link.deliver(Frame(self.payload_type, client_id, epoch, step, payload),
                                 self.direction, self.name, counterfactual=False)
            ids, rows = decode_samples(frame.payload)
            for sid, row in zip(ids, rows):
                uploads[sid] = row
                if self.gated:
                    commit_transmission(self.sender, self.receiver, CacheKey(client_id, sid, self.name),
                                        row, self.projection.project(row))
        reused = ~plan.send
        if reused.any():
            frame = link.deliver(Frame(self.skip_type, client_id, epoch, step, encode_skip(self.name, reused)),
                                 self.direction, self.name, counterfactual=False)
            name, mask = decode_skip(frame.payload)
            if name != self.name or not np.array_equal(mask, reused):
                raise ProtocolError(f"skip notice for {name} does not match the gate plan")
        return assemble_server_batch(uploads, self.receiver, sample_ids, client_id, self.name)


def gradient_return(interface, link, client_id, epoch, step, sample_ids, gradients, theta, cold_start):
    """Gate and send cut gradients server -> client; returns the client's gradient batch"""
    plan = interface.decide(client_id, sample_ids, gradients, theta, cold_start)
    return interface.transmit(link, client_id, epoch, step, sample_ids, gradients, plan), plan


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_ppl: float
    thetas: dict
    sends: dict
    reuses: dict
    similarity: dict
    client_loss: list
    bytes_up: int
    bytes_down: int
    payload_bytes_up: int
    baseline_bytes_up: int
    baseline_bytes_down: int
    latency_s: float
    coherent: bool = True

    @property
    def sends_up(self):
        return sum(v for k, v in self.sends.items() if direction_of(k) == 'up')

    @property
    def reuses_up(self):
        return sum(v for k, v in self.reuses.items() if direction_of(k) == 'up')


class _EpochStats:
    def __init__(self, interfaces, clients):
        self.sends = {name: 0 for name in interfaces}
        self.reuses = {name: 0 for name in interfaces}
        self.sim = {name: [[0.0, 0] for _ in range(clients)] for name in interfaces}

    def add(self, name, client_id, plan):
        sent = int(plan.send.sum())
        self.sends[name] += sent
        self.reuses[name] += len(plan.send) - sent
        for s in plan.similarities:
            if s is not None:
                self.sim[name][client_id][0] += s
                self.sim[name][client_id][1] += 1

    def client_similarity(self, name):
        return {c: (total / n if n else None) for c, (total, n) in enumerate(self.sim[name])}

    def mean_similarity(self, name):
        total = sum(t for t, _ in self.sim[name])
        n = sum(n for _, n in self.sim[name])
        return total / n if n else None


@dataclass
class _ClientPlan:
    ids: list
    activation: np.ndarray
    plan: GatePlan


@dataclass
class _ServeResult:
    front_grad: np.ndarray
    tail_grads: dict


class ClientNode:
    """One client: frontend (and ushape tail) adapters, local shard, optimizer"""

    def __init__(self, client_id, model, shard, optimizer):
        self.client_id = client_id
        self.model = model
        self.tokens, self.labels = shard
        self.optimizer = optimizer
        self.order = np.arange(len(self.tokens))
        self.loss_sum = 0.0
        self.token_count = 0

    @property
    def size(self):
        return len(self.tokens)


class ServerNode:
    """Server-side adapters (one shared set or one per client stream) and label store"""

    def __init__(self, model, clients, mode, make_optimizer):
        self.mode = mode
        if mode == 'per_stream':
            self.models = [model.fork() for _ in range(clients)]
            self.optimizers = [make_optimizer(1) for _ in range(clients)]
        else:
            self.models = [model] * clients
            shared = make_optimizer(clients)
            self.optimizers = [shared] * clients
        self.labels = {}
        self.loss_sum = [0.0] * clients
        self.token_count = [0] * clients

    def model_for(self, client_id):
        return self.models[client_id]

    def step(self, client_id, grads):
        optimizer_step(self.optimizers[client_id], self.models[client_id].adapters, grads)


class Session:
    """World state of one run: clients, server, interfaces, link and controller"""

    def __init__(self, settings, corpus, model, controller, link, seed=None):
        self.settings = settings
        self.corpus = corpus
        self.controller = controller
        self.link = link
        self.seed = settings.run.seed if seed is None else seed
        self.topology = settings.protocol.topology
        self.epochs = settings.training.epochs
        self.batch_size = settings.training.batch_size
        self.steps_per_epoch = settings.steps_per_epoch
        self.interval = settings.aggregation_interval
        self.global_step = 0
        self._aggregated = True

        training = settings.training
        client_steps = settings.total_client_steps
        K = settings.federation.clients
        self.clients = [
            ClientNode(i, model.fork(), corpus.shards[i], AdamW.from_training(training, client_steps))
            for i in range(K)]
        self.server = ServerNode(model.fork(), K, settings.federation.server_adapters,
                                 lambda streams: AdamW.from_training(training, client_steps * streams))
        self.weights = client_weights([c.size for c in self.clients])
        self.client_names = model.client_adapter_names()
        self.server_names = model.server_adapter_names()
        self.global_client = model.adapters.subset(self.client_names).copy()

        gated = set(settings.active_interfaces()) if settings.compression.enabled else set()
        present = ('f2s', 's2t', 't2s', 's2f') if self.topology == 'ushape' else ('f2s', 's2f')
        self.projection_seeds = {name: self.seed for name in present}
        self.interfaces = {
            name: GatedInterface(name, self.topology, make_projection(settings, name, self.projection_seeds[name]),
                                 settings.compression.quantize_int8, name in gated)
            for name in present}
        self.gated = tuple(name for name in present if name in gated)
        self._pool = ThreadPoolExecutor(max_workers=K) if settings.protocol.concurrent else None

    # -- scheduling ----------------------------------------------------

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- session start ---------------------------------------------------

    def start(self):
        """SessionHello to every client: config hash, run seed, projection seeds"""
        digest = self.settings.config_hash()
        payload = encode_hello(digest, self.seed, self.projection_seeds)
        for client in self.clients:
            frame = self.link.deliver(Frame(MessageType.SESSION_HELLO, client.client_id, 0, 0, payload), 'down')
            config_hash, seed, seeds = decode_hello(frame.payload)
            if config_hash != digest or seed != self.seed or seeds != self.projection_seeds:
                raise ProtocolError(f"client {client.client_id}: session parameters disagree")
        logger.info("Session started: %s topology, %d clients, gated %s", self.topology,
                    len(self.clients), ', '.join(self.gated) or 'none')

    # -- one step ------------------------------------------------------

    def _client_forward(self, client, epoch, step, thetas, cold):
        ids = batch_ids(client.order, step, self.batch_size)
        if not ids:
            return None
        rng = dropout_stream(self.seed, epoch, step, client.client_id)
        activation = client.model.forward_frontend(client.tokens[ids], rng.fork('frontend'), train=True)
        plan = self.interfaces['f2s'].decide(client.client_id, ids, activation, thetas.get('f2s'), cold)
        return _ClientPlan(ids, activation, plan)

    def _send_labels(self, client, ids, epoch, step):
        if self.topology == 'ushape':
            raise ProtocolError("labels never leave the client in the ushape topology")
        missing = [sid for sid in ids if (client.client_id, sid) not in self.server.labels]
        if not missing:
            return
        payload = encode_samples(missing, client.labels[missing].astype(np.int64))
        frame = self.link.deliver(Frame(MessageType.LABEL_BLOCK, client.client_id, epoch, step, payload), 'up')
        got_ids, rows = decode_samples(frame.payload)
        for sid, row in zip(got_ids, rows):
            self.server.labels[(client.client_id, sid)] = row

    def _serve(self, client, cp, epoch, step, thetas, cold, stats):
        cid, ids = client.client_id, cp.ids
        link = self.link
        rng = dropout_stream(self.seed, epoch, step, cid)
        if self.topology != 'ushape':
            self._send_labels(client, ids, epoch, step)
        batch = self.interfaces['f2s'].transmit(link, cid, epoch, step, ids, cp.activation, cp.plan)
        stats.add('f2s', cid, cp.plan)
        server_model = self.server.model_for(cid)

        tail_grads = {}
        if self.topology == 'ushape':
            s2t, t2s = self.interfaces['s2t'], self.interfaces['t2s']
            trunk = server_model.forward_trunk(batch, rng.fork('trunk'), train=True)
            plan = s2t.decide(cid, ids, trunk, thetas.get('s2t'), cold)
            trunk_at_client = s2t.transmit(link, cid, epoch, step, ids, trunk, plan)
            stats.add('s2t', cid, plan)
            tail = client.model.forward_tail_and_loss(trunk_at_client, client.labels[ids],
                                                      rng.fork('tail'), train=True)
            client.loss_sum += tail.loss * tail.token_count
            client.token_count += tail.token_count
            tail_grads = tail.adapter_grads
            plan = t2s.decide(cid, ids, tail.input_grad, thetas.get('t2s'), cold)
            grad_at_server = t2s.transmit(link, cid, epoch, step, ids, tail.input_grad, plan)
            stats.add('t2s', cid, plan)
            server_grads, cut_grad = server_model.backward_segment('trunk', grad_at_server)
        else:
            labels = np.stack([self.server.labels[(cid, sid)] for sid in ids])
            result = server_model.forward_server_with_loss(batch, labels, rng.fork('server'), train=True)
            self.server.loss_sum[cid] += result.loss * result.token_count
            self.server.token_count[cid] += result.token_count
            server_grads, cut_grad = result.adapter_grads, result.input_grad
        self.server.step(cid, server_grads)

        s2f = self.interfaces['s2f']
        front_grad, plan = gradient_return(s2f, link, cid, epoch, step, ids, cut_grad, thetas.get('s2f'), cold)
        if s2f.gated:
            stats.add('s2f', cid, plan)
        return _ServeResult(front_grad, tail_grads)

    def _client_update(self, item):
        client, cp, served, cold = item
        if cp is None:
            return
        grad = served.front_grad
        grads = {}
        frozen = False
        if self.settings.training.reused_backward == 'freeze' and not cold:
            reused = ~cp.plan.send
            if reused.all():
                client.model.discard_record('frontend')
                frozen = True
            elif reused.any():
                grad = grad.copy()
                grad[reused] = 0.0
        if not frozen:
            grads, _ = client.model.backward_segment('frontend', grad)
        grads.update(served.tail_grads)
        if grads:
            optimizer_step(client.optimizer, client.model.adapters, grads)

    def train_step(self, epoch, step, thetas, stats):
        cold = epoch == 1
        plans = self._map(lambda c: self._client_forward(c, epoch, step, thetas, cold), self.clients)
        served = []
        for client, cp in zip(self.clients, plans):
            served.append(None if cp is None else self._serve(client, cp, epoch, step, thetas, cold, stats))
        self._map(self._client_update, [(c, cp, s, cold) for c, cp, s in zip(self.clients, plans, served)])

    # -- aggregation ---------------------------------------------------

    def aggregate(self, epoch, step):
        """AdapterUpload from every client, FedAvg, AdapterBroadcast back"""
        received = []
        for client in self.clients:
            payload = encode_adapters(client.model.adapters.subset(self.client_names))
            frame = self.link.deliver(Frame(MessageType.ADAPTER_UPLOAD, client.client_id, epoch, step, payload), 'up')
            received.append(decode_adapters(frame.payload))
        self.global_client = fedavg(received, self.weights)
        broadcast(self.global_client, [c.model.adapters for c in self.clients], self.link, epoch, step)
        if self.server.mode == 'per_stream':
            merged = fedavg([m.adapters.subset(self.server_names) for m in self.server.models], self.weights)
            for m in self.server.models:
                m.adapters.update(merged)
        self._aggregated = True
        logger.debug("FedAvg round at epoch %d step %d", epoch, step)

    def global_model(self):
        """Post-aggregation model for evaluation"""
        client_adapters = self.global_client
        if not self._aggregated:
            client_adapters = fedavg([c.model.adapters.subset(self.client_names) for c in self.clients], self.weights)
        server = self.server.models[0]
        if self.server.mode == 'per_stream':
            server = server.fork()
            server.adapters.update(fedavg([m.adapters.subset(self.server_names) for m in self.server.models],
                                          self.weights))
        return server.compose(client_adapters)

    # -- epoch -----------------------------------------------------------

    def _exchange_eval_reports(self, epoch):
        losses = []
        for client in self.clients:
            cid = client.client_id
            if self.topology == 'ushape':
                payload, direction = encode_eval_report(client.loss_sum, client.token_count), 'up'
            else:
                payload = encode_eval_report(self.server.loss_sum[cid], self.server.token_count[cid])
                direction = 'down'
            frame = self.link.deliver(Frame(MessageType.EVAL_REPORT, cid, epoch, self.steps_per_epoch, payload),
                                      direction)
            loss_sum, tokens = decode_eval_report(frame.payload)
            losses.append((loss_sum, tokens))
        return losses

    def check_coherence(self):
        for name in self.gated:
            iface = self.interfaces[name]
            if iface.sender.pending():
                return False
            if check_coherence(iface.sender, iface.receiver, iface.projection):
                return False
        return True

    def run_epoch(self, epoch):
        """Train one epoch, evaluate, update the controller; epochs count from 1"""
        thetas = self.controller.thetas
        stats = _EpochStats(self.interfaces, len(self.clients))
        for client in self.clients:
            client.order = shuffle_order(self.seed, epoch, client.client_id, client.size)
            client.loss_sum, client.token_count = 0.0, 0
        self.server.loss_sum = [0.0] * len(self.clients)
        self.server.token_count = [0] * len(self.clients)

        for step in range(self.steps_per_epoch):
            self.train_step(epoch, step, thetas, stats)
            self.global_step += 1
            self._aggregated = False
            if self.global_step % self.interval == 0:
                self.aggregate(epoch, step)

        losses = self._exchange_eval_reports(epoch)
        total_tokens = sum(t for _, t in losses)
        train_loss = sum(s for s, _ in losses) / total_tokens if total_tokens else float('nan')
        client_loss = [s / t if t else float('nan') for s, t in losses]

        nll_sum, count = self.global_model().evaluate(self.corpus.val.tokens, self.corpus.val.labels)
        val_loss = nll_sum / count
        val_ppl = math.exp(val_loss)
        coherent = self.check_coherence()
        if not coherent:
            logger.warning("Cache coherence violated after epoch %d", epoch)

        ledger = self.link.sent
        rates = (self.settings.protocol.uplink_mbps, self.settings.protocol.downlink_mbps)
        up_types = {iface.payload_type for iface in self.interfaces.values() if iface.direction == 'up'}
        report = EpochReport(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_ppl=val_ppl,
            thetas={name: thetas[name] for name in self.gated if name in thetas},
            sends={name: stats.sends[name] for name in self.gated},
            reuses={name: stats.reuses[name] for name in self.gated},
            similarity={name: stats.mean_similarity(name) for name in self.gated},
            client_loss=client_loss,
            bytes_up=ledger.total(direction='up', epoch=epoch),
            bytes_down=ledger.total(direction='down', epoch=epoch),
            payload_bytes_up=ledger.total(direction='up', epoch=epoch, types=up_types),
            baseline_bytes_up=ledger.total(direction='up', epoch=epoch, baseline=True),
            baseline_bytes_down=ledger.total(direction='down', epoch=epoch, baseline=True),
            latency_s=estimate_latency(ledger, *rates, epoch=epoch).total_s,
            coherent=coherent)

        feedback = EpochFeedback(
            epoch=epoch, total_epochs=self.epochs, val_ppl=val_ppl, val_loss=val_loss,
            similarity={name: stats.client_similarity(name) for name in self.gated},
            gated_bytes=sum(ledger.total(epoch=epoch, interface=name) for name in self.gated),
            baseline_bytes=sum(ledger.total(epoch=epoch, interface=name, baseline=True) for name in self.gated))
        self.controller.observe(feedback)

        theta_text = ' '.join(f"{k}={v:.4f}" for k, v in report.thetas.items())
        logger.info("epoch %d loss %.4f val_ppl %.3f %s sends_up %d reuses_up %d bytes up %d down %d",
                    epoch, train_loss, val_ppl, theta_text, report.sends_up, report.reuses_up,
                    report.bytes_up, report.bytes_down)
        return report

    def cache_report(self):
        """Cache bytes held by the clients and by the server"""
        parties = {'client': [], 'server': []}
        for iface in self.interfaces.values():
            sender, receiver = ('client', 'server') if iface.direction == 'up' else ('server', 'client')
            parties[sender].append(iface.sender)
            parties[receiver].append(iface.receiver)
        return cache_memory_report(parties)
