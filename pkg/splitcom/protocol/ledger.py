"""
Byte accounting per (epoch, direction, message type, interface) and the
fixed-rate latency model.
"""

import csv
import logging
from collections import namedtuple
from dataclasses import dataclass

from splitcom.protocol.wire import HEADER_SIZE, LABEL_TYPES, MessageType

logger = logging.getLogger(__name__)

LedgerKey = namedtuple('LedgerKey', ['epoch', 'direction', 'type', 'interface'])

LEDGER_FIELDS = ['epoch', 'direction', 'type', 'interface', 'count', 'payload_bytes', 'frame_bytes',
                 'baseline_count', 'baseline_frame_bytes']


@dataclass
class LedgerEntry:
    count: int = 0
    payload_bytes: int = 0
    frame_bytes: int = 0


class CommLedger:
    """Message counts and bytes, plus the fp32 no-reuse counterfactual"""

    def __init__(self, name=''):
        self.name = name
        self.entries = {}
        self.baseline = {}

    @staticmethod
    def _add(table, key, payload_bytes, count=1):
        entry = table.setdefault(key, LedgerEntry())
        entry.count += count
        entry.payload_bytes += payload_bytes
        entry.frame_bytes += payload_bytes + count * HEADER_SIZE

    def record(self, frame, direction, interface=''):
        self._add(self.entries, LedgerKey(frame.epoch, direction, MessageType(frame.type), interface),
                  len(frame.payload))

    def record_baseline(self, epoch, direction, msg_type, payload_bytes, interface='', count=1):
        """Bytes the uncompressed fp32 run would have sent at this point"""
        self._add(self.baseline, LedgerKey(epoch, direction, MessageType(msg_type), interface),
                  payload_bytes, count)

    @staticmethod
    def _select(table, direction=None, epoch=None, types=None, interface=None):
        for key, entry in table.items():
            if direction is not None and key.direction != direction:
                continue
            if epoch is not None and key.epoch != epoch:
                continue
            if types is not None and key.type not in types:
                continue
            if interface is not None and key.interface != interface:
                continue
            yield key, entry

    def total(self, field='frame_bytes', baseline=False, **selection):
        table = self.baseline if baseline else self.entries
        return sum(getattr(entry, field) for _, entry in self._select(table, **selection))

    def count(self, **selection):
        return self.total('count', **selection)

    def interfaces(self):
        """Gated interfaces with at least one recorded message"""
        return sorted({key.interface for key in self.entries if key.interface})

    def label_bytes(self, direction='up'):
        return self.total('payload_bytes', direction=direction, types=LABEL_TYPES)

    def by_type(self, direction=None):
        """{(direction, type name): LedgerEntry} summed over epochs and interfaces"""
        summary = {}
        for key, entry in self._select(self.entries, direction=direction):
            total = summary.setdefault((key.direction, key.type.name), LedgerEntry())
            total.count += entry.count
            total.payload_bytes += entry.payload_bytes
            total.frame_bytes += entry.frame_bytes
        return summary

    def rows(self):
        rows = []
        for key in sorted(set(self.entries) | set(self.baseline)):
            entry = self.entries.get(key, LedgerEntry())
            base = self.baseline.get(key, LedgerEntry())
            rows.append({
                'epoch': key.epoch, 'direction': key.direction, 'type': key.type.name,
                'interface': key.interface, 'count': entry.count,
                'payload_bytes': entry.payload_bytes, 'frame_bytes': entry.frame_bytes,
                'baseline_count': base.count, 'baseline_frame_bytes': base.frame_bytes,
            })
        return rows

    def write_csv(self, filename):
        """Write the ledger rows

        Args:
            filename: Output path

        Returns:
            The path written
        """
        with open(filename, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=LEDGER_FIELDS, lineterminator='\n')
            writer.writeheader()
            writer.writerows(self.rows())
        logger.debug("Ledger %s written to %s", self.name, filename)
        return filename

    @classmethod
    def read_csv(cls, filename):
        """Rebuild a ledger from rows written by ``write_csv``"""
        ledger = cls(filename)
        with open(filename, 'r', newline='') as f:
            for row in csv.DictReader(f):
                key = LedgerKey(int(row['epoch']), row['direction'], MessageType[row['type']], row['interface'])
                if int(row['count']):
                    ledger.entries[key] = LedgerEntry(int(row['count']), int(row['payload_bytes']),
                                                      int(row['frame_bytes']))
                if int(row['baseline_count']):
                    base_frame = int(row['baseline_frame_bytes'])
                    count = int(row['baseline_count'])
                    ledger.baseline[key] = LedgerEntry(count, base_frame - count * HEADER_SIZE, base_frame)
        return ledger

    def matches(self, other):
        """Same count and byte totals for every key"""
        return self.entries == other.entries


@dataclass
class LatencyEstimate:
    uplink_s: float
    downlink_s: float

    @property
    def total_s(self):
        return self.uplink_s + self.downlink_s


def transfer_seconds(uplink_bytes, downlink_bytes, uplink_mbps, downlink_mbps):
    """bytes * 8 / rate per direction, rates in Mbit/s"""
    if uplink_mbps <= 0 or downlink_mbps <= 0:
        raise ValueError("link rates must be > 0")
    return LatencyEstimate(uplink_bytes * 8.0 / (uplink_mbps * 1e6),
                           downlink_bytes * 8.0 / (downlink_mbps * 1e6))


def estimate_latency(ledger, uplink_mbps=30.6, downlink_mbps=166.8, epoch=None):
    """Transfer time of every recorded frame (payload plus framing)"""
    return transfer_seconds(ledger.total(direction='up', epoch=epoch),
                            ledger.total(direction='down', epoch=epoch),
                            uplink_mbps, downlink_mbps)
