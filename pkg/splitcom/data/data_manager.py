"""
Run directories: resolved config, per-epoch metrics, summary, ledger and checkpoints.
"""

import csv
import json
import logging
import os
import time

from splitcom.config.settings import Settings
from splitcom.model.checkpoint import save_checkpoint

logger = logging.getLogger(__name__)

METRICS_HEADER = ['epoch', 'train_loss', 'val_ppl', 'theta_f2s', 'theta_s2t', 'theta_t2s', 'theta_s2f',
                  'sends_up', 'reuses_up', 'bytes_up', 'bytes_down', 'latency_s']

CONFIG_FILE = 'config.txt'
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
LEDGER_FILE = 'ledger.csv'
CHECKPOINT_DIR = 'checkpoints'


def _number(value):
    return '' if value is None else format(value, '.9g')


def metrics_row(report):
    """One CSV row for an EpochReport; inactive interfaces leave their theta empty"""
    row = {
        'epoch': str(report.epoch),
        'train_loss': _number(report.train_loss),
        'val_ppl': _number(report.val_ppl),
        'sends_up': str(report.sends_up),
        'reuses_up': str(report.reuses_up),
        'bytes_up': str(report.bytes_up),
        'bytes_down': str(report.bytes_down),
        'latency_s': _number(report.latency_s),
    }
    for name in ('f2s', 's2t', 't2s', 's2f'):
        row[f'theta_{name}'] = _number(report.thetas.get(name))
    return row


class DataManager:
    """Owns one run directory"""

    def __init__(self, run_dir):
        self.run_dir = run_dir
        os.makedirs(self.run_dir, exist_ok=True)

    @staticmethod
    def generate_run_dir(out_dir, prefix="run"):
        """Timestamped directory name under ``out_dir``

        Args:
            out_dir: Parent directory
            prefix: A string to prepend to the directory name

        Returns:
            Path of a directory that does not exist yet
        """
        timestamp = time.strftime("%Y%m%d-%H%M%S")
        path = os.path.join(out_dir, f"{prefix}_{timestamp}")
        suffix = 1
        while os.path.exists(path):
            suffix += 1
            path = os.path.join(out_dir, f"{prefix}_{timestamp}_{suffix}")
        return path

    def path(self, name):
        return os.path.join(self.run_dir, name)

    def save_config(self, settings):
        return settings.save(self.path(CONFIG_FILE))

    def write_metrics(self, rows):
        with open(self.path(METRICS_FILE), 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_HEADER, lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)
        return self.path(METRICS_FILE)

    def write_summary(self, summary):
        with open(self.path(SUMMARY_FILE), 'w') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        return self.path(SUMMARY_FILE)

    def write_ledger(self, ledger):
        return ledger.write_csv(self.path(LEDGER_FILE))

    def save_checkpoint(self, name, tensors, config_text=""):
        os.makedirs(self.path(CHECKPOINT_DIR), exist_ok=True)
        return save_checkpoint(os.path.join(self.path(CHECKPOINT_DIR), f"{name}.scmd"), tensors, config_text)

    def checkpoint_dir(self):
        os.makedirs(self.path(CHECKPOINT_DIR), exist_ok=True)
        return self.path(CHECKPOINT_DIR)


def load_run(run_dir):
    """Read a run directory back

    Args:
        run_dir: Directory written by DataManager

    Returns:
        tuple of (settings, metrics rows, summary dict)
    """
    settings = Settings.load(os.path.join(run_dir, CONFIG_FILE))
    with open(os.path.join(run_dir, METRICS_FILE), 'r', newline='') as f:
        rows = list(csv.DictReader(f))
    with open(os.path.join(run_dir, SUMMARY_FILE), 'r') as f:
        summary = json.load(f)
    return settings, rows, summary
