#!/usr/bin/env python3
"""
splitcom - Main Entry Point
Split-federated fine-tuning runs with similarity-gated reuse of cut tensors.
"""

import argparse
import logging
import sys

from splitcom.config.settings import POLICIES, TOPOLOGIES, Settings
from splitcom.errors import SplitComError
from splitcom.harness.compare import compare_runs, write_comparison
from splitcom.harness.presets import preset_names, preset_settings
from splitcom.harness.runner import run_settings
from splitcom.protocol.audit import audit_run_dir

logger = logging.getLogger("splitcom")


def build_parser():
    parser = argparse.ArgumentParser(prog="splitcom", description=__doc__.strip().splitlines()[-1])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="train one configuration and write its run directory")
    run.add_argument("--config", help="section.key: value file applied before any flag")
    run.add_argument("--preset", help="named preset, see 'splitcom presets'")
    run.add_argument("--topology", choices=TOPOLOGIES)
    run.add_argument("--policy", choices=POLICIES)
    run.add_argument("--theta", type=float, help="fixed threshold, or DDPG starting threshold")
    run.add_argument("--epochs", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--quantize-int8", action="store_true", default=None)
    run.add_argument("--transport", help="'inproc' or a pyserial URL such as loop:// or socket://host:port")
    run.add_argument("--concurrent", action="store_true", default=None)
    run.add_argument("--out", help="run directory (default: timestamped under run.out_dir)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="any other setting, e.g. --set bbc.tolerance=0.05")

    audit = commands.add_parser("audit", help="label-flow audit of finished runs")
    audit.add_argument("run_dirs", nargs="+")

    report = commands.add_parser("report", help="compare runs against the first one")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--csv", help="also write the table to this file")

    commands.add_parser("presets", help="list preset names")
    return parser


def resolve_settings(args):
    """Defaults, then config file, then preset, then flags"""
    settings = Settings.load(args.config) if args.config else Settings()
    flags = {
        'protocol.topology': args.topology,
        'control.policy': args.policy,
        'control.theta': args.theta,
        'training.epochs': args.epochs,
        'federation.clients': args.clients,
        'run.seed': args.seed,
        'compression.quantize_int8': args.quantize_int8,
        'protocol.transport': args.transport,
        'protocol.concurrent': args.concurrent,
    }
    overrides = {key: value for key, value in flags.items() if value is not None}
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise SplitComError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.preset:
        return preset_settings(args.preset, overrides, settings)
    return settings.apply_overrides(overrides).validate()


def cmd_run(args):
    settings = resolve_settings(args)
    result = run_settings(settings, args.out)
    print(result.run_dir)
    return 0


def cmd_audit(args):
    status = 0
    for run_dir in args.run_dirs:
        ok, message = audit_run_dir(run_dir)
        print(f"{run_dir}: {message}")
        if not ok:
            status = 1
    return status


def cmd_report(args):
    rows = compare_runs(args.run_dirs)
    if args.csv:
        write_comparison(rows, args.csv)
    width = max(len(row['run']) for row in rows)
    print(f"{'run':<{width}}  {'val_ppl':>9}  {'loss':>8}  {'up_ratio':>8}  {'payload':>8}  {'latency_s':>10}")
    for row in rows:
        print(f"{row['run']:<{width}}  {row['final_val_ppl']:>9.3f}  {row['final_train_loss']:>8.4f}  "
              f"{row['comm_ratio_up']:>8.4f}  {row['payload_ratio_up']:>8.4f}  {row['latency_s']:>10.3f}")
    return 0


def cmd_presets(args):
    for name in preset_names():
        print(name)
    return 0


COMMANDS = {'run': cmd_run, 'audit': cmd_audit, 'report': cmd_report, 'presets': cmd_presets}


def main(argv=None):
    """Main entry point for the splitcom command line"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SplitComError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
