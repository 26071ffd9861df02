"""
Monolithic reference loop: the same segment calls, seeds and update order as
the engine, with no framing, gating or transport in between.
"""

from dataclasses import dataclass

from splitcom.errors import ModeError
from splitcom.federation.aggregate import client_weights, fedavg
from splitcom.model.optimizer import AdamW, optimizer_step
from splitcom.protocol.engine import batch_ids, dropout_stream, shuffle_order


@dataclass
class ReferenceResult:
    client_adapters: list
    server_adapters: object
    step_losses: list


def reference_run(settings, corpus, model, epochs=None):
    """Train the standard split layout in one process without the protocol

    Returns:
        ReferenceResult with every client's adapters, the server adapters and
        the per-(step, client) server losses
    """
    if settings.protocol.topology != 'standard' or settings.federation.server_adapters != 'shared':
        raise ModeError("the reference loop covers the standard topology with a shared server adapter")
    seed = settings.run.seed
    training = settings.training
    epochs = training.epochs if epochs is None else epochs
    K = settings.federation.clients
    total = settings.total_client_steps

    clients = [model.fork() for _ in range(K)]
    client_opts = [AdamW.from_training(training, total) for _ in range(K)]
    server = model.fork()
    server_opt = AdamW.from_training(training, total * K)
    names = model.client_adapter_names()
    weights = client_weights([len(shard.tokens) for shard in corpus.shards[:K]])

    losses = []
    global_step = 0
    for epoch in range(1, epochs + 1):
        orders = [shuffle_order(seed, epoch, i, len(corpus.shards[i].tokens)) for i in range(K)]
        for step in range(settings.steps_per_epoch):
            batches = [batch_ids(orders[i], step, training.batch_size) for i in range(K)]
            activations = []
            for i, ids in enumerate(batches):
                if not ids:
                    activations.append(None)
                    continue
                rng = dropout_stream(seed, epoch, step, i).fork('frontend')
                activations.append(clients[i].forward_frontend(corpus.shards[i].tokens[ids], rng, train=True))
            cut_grads = []
            for i, ids in enumerate(batches):
                if activations[i] is None:
                    cut_grads.append(None)
                    continue
                rng = dropout_stream(seed, epoch, step, i).fork('server')
                result = server.forward_server_with_loss(activations[i], corpus.shards[i].labels[ids], rng, train=True)
                optimizer_step(server_opt, server.adapters, result.adapter_grads)
                losses.append(result.loss)
                cut_grads.append(result.input_grad)
            for i, grad in enumerate(cut_grads):
                if grad is None:
                    continue
                grads, _ = clients[i].backward_segment('frontend', grad)
                optimizer_step(client_opts[i], clients[i].adapters, grads)
            global_step += 1
            if global_step % settings.aggregation_interval == 0:
                merged = fedavg([c.adapters.subset(names) for c in clients], weights)
                for c in clients:
                    c.adapters.update(merged)
    return ReferenceResult([c.adapters for c in clients], server.adapters, losses)
