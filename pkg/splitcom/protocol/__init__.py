"""
Wire framing, byte accounting, transports and the label audit.

The training engine lives in ``splitcom.protocol.engine``.
"""

from splitcom.protocol.audit import AuditResult, audit_run_dir, label_flow_audit
from splitcom.protocol.ledger import CommLedger, LatencyEstimate, estimate_latency, transfer_seconds
from splitcom.protocol.transport import InProcChannel, Link, StreamTransport, open_channel
from splitcom.protocol.wire import Frame, FrameDecoder, MessageType, decode_frame, encode_frame

__all__ = [
    'AuditResult', 'CommLedger', 'audit_run_dir', 'Frame', 'FrameDecoder', 'InProcChannel', 'LatencyEstimate', 'Link',
    'MessageType', 'StreamTransport', 'decode_frame', 'encode_frame', 'estimate_latency',
    'label_flow_audit', 'open_channel', 'transfer_seconds',
]
