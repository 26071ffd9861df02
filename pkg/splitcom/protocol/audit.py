"""
Label-flow audit over a run's ledger.
"""

import logging
import os
from dataclasses import dataclass

from splitcom.config.settings import Settings
from splitcom.errors import SplitComError
from splitcom.protocol.ledger import CommLedger

logger = logging.getLogger(__name__)


@dataclass
class AuditResult:
    passed: bool
    label_bytes_up: int
    message: str


def label_flow_audit(ledger, topology):
    """U-shape fails on any label bytes client->server; other topologies report them"""
    label_bytes = ledger.label_bytes('up')
    if topology == 'ushape':
        if label_bytes > 0:
            result = AuditResult(False, label_bytes,
                                 f"FAIL: {label_bytes} label bytes sent client->server in a ushape run")
            logger.warning(result.message)
            return result
        return AuditResult(True, 0, "PASS: no label bytes left the clients")
    return AuditResult(True, label_bytes,
                       f"PASS ({topology}): labels travel uplink by design, {label_bytes} label bytes")


def audit_run_dir(run_dir):
    """Audit a finished run directory

    Returns:
        tuple of (passed, message); a missing or unreadable run is a failure
    """
    try:
        settings = Settings.load(os.path.join(run_dir, 'config.txt'))
        ledger = CommLedger.read_csv(os.path.join(run_dir, 'ledger.csv'))
    except (OSError, SplitComError, KeyError, ValueError) as e:
        return False, f"Cannot audit {run_dir}: {e}"
    result = label_flow_audit(ledger, settings.protocol.topology)
    return result.passed, result.message
