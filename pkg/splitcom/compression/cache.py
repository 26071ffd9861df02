"""
Sender comparison caches, receiver reuse caches and the similarity gate.

The sender keeps a compressed vector per sample and interface; the receiver
keeps the full tensor it last received for the same key. Both are written at
the same transmission event, so at every step boundary

    sender[key] == project(P, receiver[key])
"""

import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from splitcom.compression.projection import cosine
from splitcom.errors import ProtocolError
from splitcom.kernel.tensor import DTYPE

logger = logging.getLogger(__name__)

CacheKey = namedtuple('CacheKey', ['client_id', 'sample_id', 'interface'])

SEND = 'send'
REUSE = 'reuse'


@dataclass(frozen=True)
class GateDecision:
    action: str
    similarity: float = None

    @property
    def send(self):
        return self.action == SEND


class _Cache:
    def __init__(self):
        self._entries = {}

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, key):
        return self._entries.get(key)

    def keys(self):
        return sorted(self._entries)

    def items(self):
        return [(key, self._entries[key]) for key in self.keys()]

    def nbytes(self):
        return sum(value.size * 4 for value in self._entries.values())

    def _write(self, key, value):
        self._entries[key] = np.array(value, dtype=DTYPE)


class ComparisonCache(_Cache):
    """Sender side: CacheKey -> compressed vector"""

    def __init__(self):
        super().__init__()
        self._pending = set()

    def mark_pending(self, key):
        self._pending.add(key)

    def take_pending(self, key):
        if key not in self._pending:
            raise ProtocolError(f"commit without a Send decision for {key}")
        self._pending.discard(key)

    def pending(self):
        return sorted(self._pending)


class ReuseCache(_Cache):
    """Receiver side: CacheKey -> full tensor as received"""

    def lookup(self, key):
        value = self._entries.get(key)
        if value is None:
            raise ProtocolError(f"reuse requested for {key} but the cache holds no entry")
        return value


def gate(sender_cache, key, current_compressed, theta, cold_start=False):
    """Send iff no entry exists, the gate is bypassed, or similarity < theta

    Ties (similarity == theta) reuse. A Send overwrites the sender entry and
    leaves the key pending until commit_transmission.
    """
    cached = sender_cache.get(key)
    similarity = None
    if cached is not None:
        similarity = cosine(current_compressed, cached)
    if cold_start or cached is None or similarity < theta:
        sender_cache._write(key, current_compressed)
        sender_cache.mark_pending(key)
        return GateDecision(SEND, similarity)
    return GateDecision(REUSE, similarity)


def commit_transmission(sender_cache, receiver_cache, key, full_tensor, compressed):
    """Record a transmitted payload on both sides for ``key``

    Args:
        sender_cache: ComparisonCache that gated the key
        receiver_cache: ReuseCache of the receiving party
        key: CacheKey
        full_tensor: The tensor as the receiver holds it (dequantized under INT8)
        compressed: Projection of ``full_tensor``
    """
    sender_cache.take_pending(key)
    sender_cache._write(key, compressed)
    receiver_cache._write(key, full_tensor)


def check_coherence(sender_cache, receiver_cache, projection, keys=None):
    """Keys whose sender entry differs from the projection of the receiver entry"""
    broken = []
    for key in keys if keys is not None else sender_cache.keys():
        held = receiver_cache.get(key)
        if held is None or not np.array_equal(sender_cache.get(key), projection.project(held)):
            broken.append(key)
    return broken


def cache_memory_report(caches):
    """Bytes held per party

    Args:
        caches: {party: iterable of ComparisonCache / ReuseCache}

    Returns:
        {party: bytes}
    """
    return {party: sum(cache.nbytes() for cache in group) for party, group in caches.items()}
