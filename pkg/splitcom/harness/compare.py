"""
Comparison table over finished run directories.
"""

import csv

from splitcom.data.data_manager import load_run
from splitcom.errors import ComparisonError

COMPARE_HEADER = ['run', 'preset', 'final_train_loss', 'final_val_ppl', 'bytes_up', 'bytes_down',
                  'comm_ratio_up', 'payload_ratio_up', 'comm_ratio_total', 'latency_s', 'latency_ratio']


def _ratio(value, reference):
    return value / reference if reference else float('nan')


def compare_runs(run_dirs):
    """Rows in input order, ratio columns relative to the first run

    Raises:
        ComparisonError: fewer than two runs, or runs on different corpora
    """
    run_dirs = list(run_dirs)
    if len(run_dirs) < 2:
        raise ComparisonError("compare needs at least two runs")
    loaded = [(path, *load_run(path)) for path in run_dirs]
    seeds = {settings.corpus.seed for _, settings, _, _ in loaded}
    if len(seeds) != 1:
        raise ComparisonError(f"runs use different corpus seeds: {sorted(seeds)}")
    first = loaded[0][3]
    rows = []
    for path, settings, _, summary in loaded:
        total = summary['bytes_up'] + summary['bytes_down']
        rows.append({
            'run': path,
            'preset': summary.get('preset', ''),
            'final_train_loss': summary['final_train_loss'],
            'final_val_ppl': summary['final_val_ppl'],
            'bytes_up': summary['bytes_up'],
            'bytes_down': summary['bytes_down'],
            'comm_ratio_up': _ratio(summary['bytes_up'], first['bytes_up']),
            'payload_ratio_up': _ratio(summary['payload_bytes_up'], first['payload_bytes_up']),
            'comm_ratio_total': _ratio(total, first['bytes_up'] + first['bytes_down']),
            'latency_s': summary['latency_s'],
            'latency_ratio': _ratio(summary['latency_s'], first['latency_s']),
        })
    return rows


def write_comparison(rows, filename):
    with open(filename, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=COMPARE_HEADER, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, '.9g') if isinstance(v, float) else v) for k, v in row.items()})
    return filename
