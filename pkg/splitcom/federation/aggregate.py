"""
FedAvg over LoRA adapter sets and the broadcast of the result.
"""

import logging

import numpy as np

from splitcom.errors import ConfigError, ShapeError
from splitcom.kernel.tensor import DTYPE
from splitcom.model.checkpoint import decode_container, encode_container
from splitcom.model.lora import LoraAdapterSet
from splitcom.protocol.wire import Frame, MessageType

logger = logging.getLogger(__name__)


def client_weights(sizes):
    """w_i = |D_i| / |D|; exactly 1/K for equal shards"""
    total = sum(sizes)
    if total <= 0:
        raise ConfigError("client datasets are empty")
    if len(set(sizes)) == 1:
        return [1.0 / len(sizes)] * len(sizes)
    return [size / total for size in sizes]


def fedavg(adapter_sets, weights):
    """Elementwise weighted mean of every adapter tensor (A and B separately)

    Args:
        adapter_sets: Structurally identical LoraAdapterSet objects
        weights: One weight per set, summing to 1

    Returns:
        Aggregated LoraAdapterSet
    """
    adapter_sets = list(adapter_sets)
    weights = [float(w) for w in weights]
    if not adapter_sets:
        raise ShapeError("fedavg needs at least one adapter set")
    if len(weights) != len(adapter_sets):
        raise ConfigError(f"{len(weights)} weights for {len(adapter_sets)} adapter sets")
    if abs(sum(weights) - 1.0) > 1e-9 or any(w < 0 for w in weights):
        raise ConfigError(f"client weights must be non-negative and sum to 1, got {sum(weights)!r}")
    structure = adapter_sets[0].structure()
    for other in adapter_sets[1:]:
        if other.structure() != structure:
            raise ShapeError("adapter sets differ in names or dims")
    result = LoraAdapterSet()
    for name, dims in structure:
        acc = np.zeros(dims, dtype=np.float64)
        for adapters, w in zip(adapter_sets, weights):
            acc += w * adapters[name].astype(np.float64)
        result[name] = acc.astype(DTYPE)
    return result


def encode_adapters(adapters):
    return encode_container(adapters.tensors)


def decode_adapters(payload):
    _, tensors = decode_container(payload)
    return LoraAdapterSet(tensors)


def broadcast(global_adapters, clients, link=None, epoch=0, step=0):
    """Overwrite each client's adapters with the global set

    Args:
        global_adapters: Aggregated LoraAdapterSet
        clients: Client adapter sets, indexed by client id
        link: Optional Link; each copy is then sent as an AdapterBroadcast frame
            and taken from the decoded payload

    Returns:
        Bytes sent downlink
    """
    payload = encode_adapters(global_adapters)
    sent = 0
    for client_id, adapters in enumerate(clients):
        if link is None:
            adapters.update(global_adapters)
            continue
        frame = link.deliver(Frame(MessageType.ADAPTER_BROADCAST, client_id, epoch, step, payload), 'down')
        adapters.update(decode_adapters(frame.payload))
        sent += frame.size
    logger.debug("Broadcast %d adapter tensors to %d clients (%d bytes)", len(global_adapters), len(clients), sent)
    return sent
