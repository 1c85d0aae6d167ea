"""Command-line driver.

Exit codes: 0 success, 2 bad configuration or arguments, 3 bad or missing
input data, 4 numeric failure.  Each failure prints one diagnostic line.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

from .config import load_config, parse_overrides
from .diffusion import cosine_schedule, schedule_csv
from .errors import ConfigError, ContractViolation, ConvergenceFailure, DataFault, NumericFault
from .pipeline import STAGES, bench_encoder, run_pipeline, snapshot_config

log = logging.getLogger("protfuse")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="run a single seed (replaces run.seeds)")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override a config key, e.g. --set finetune.lr=5e-4 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="protfuse", description="Aligned multimodal protein encoder pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in STAGES[:-1]:
        sub.add_parser(stage, parents=[common], help=f"run the pipeline up to {stage}")
    sub.add_parser("evaluate", parents=[common], help="run up to evaluation and write metrics.csv")
    sub.add_parser("pipeline", parents=[common], help="run every stage for every seed")
    sched = sub.add_parser("inspect-schedule", parents=[common],
                           help="print the noise schedule as t,alpha,alpha_bar CSV")
    sched.add_argument("--T", type=int, dest="steps", help="number of diffusion steps")
    sched.add_argument("--shift", type=float, help="cosine schedule offset")
    bench = sub.add_parser("bench", parents=[common], help="time encoder inference on a trained checkpoint")
    bench.add_argument("--repeats", type=int, help="timed runs (>= 10)")
    bench.add_argument("--batch-size", type=int, help="rows per timed batch")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config, parse_overrides(args.overrides))
    if args.seed is not None:
        cfg = cfg.with_overrides([("run.seeds", [args.seed])])
    return cfg


def _write_rows(rows, stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in rows:
        w.writerow([k, repr(v) if isinstance(v, float) else v])


def _dispatch(args) -> int:
    cfg = _resolve_config(args)
    cmd = args.command
    if cmd == "inspect-schedule":
        T = cfg["diffusion"]["T"] if args.steps is None else args.steps
        shift = cfg["diffusion"]["schedule_shift"] if args.shift is None else args.shift
        if T < 1:
            raise ConfigError(f"--T must be >= 1, got {T}")
        sys.stdout.write(schedule_csv(cosine_schedule(T, shift)))
        return 0
    if cmd == "bench":
        repeats = cfg["bench"]["repeats"] if args.repeats is None else args.repeats
        batch = cfg["bench"]["batch_size"] if args.batch_size is None else args.batch_size
        if repeats < 10:
            raise ConfigError(f"--repeats must be >= 10, got {repeats}")
        if batch < 1:
            raise ConfigError(f"--batch-size must be >= 1, got {batch}")
        snapshot_config(cfg, args.out)
        rows = bench_encoder(cfg, args.out, repeats=repeats, batch_size=batch)
        with open(f"{args.out}/bench.csv", "w", newline="") as fh:
            _write_rows(rows, fh)
        _write_rows(rows, sys.stdout)
        return 0
    until = "evaluate" if cmd == "pipeline" else cmd
    path = run_pipeline(cfg, args.out, until=until)
    if path is not None:
        sys.stdout.write(path.read_text())
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"protfuse: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except (ConfigError, ContractViolation) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataFault as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericFault, ConvergenceFailure) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
