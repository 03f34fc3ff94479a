"""Command line: ``affordance-maps <command> [options]``.

Commands run in pipeline order: ``gen-data``, ``train``, ``control``,
``render``, ``report``. Settings come from the defaults, then an optional
``--config`` JSON file, then explicit flags.

Exit codes: 0 success, 2 bad usage or configuration, 3 runtime failure
(missing checkpoints, unreadable files, training errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiments as ex

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _seed_list(text):
    """``5`` means seeds 0..4; ``3,7,9`` lists them explicitly."""
    vals = _int_list(text)
    if len(vals) == 1 and "," not in text:
        return list(range(vals[0]))
    return vals


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--experiment", choices=ex.EXPERIMENTS)
    common.add_argument("--dim-c", type=_int_list, dest="dim_c", help="context sizes, e.g. 0,1,3,5,8")
    common.add_argument("--seeds", type=_seed_list, help="count (5 = seeds 0..4) or explicit list")
    common.add_argument("--scale", type=float, help="fraction of the full 200-sequence dataset")
    common.add_argument("--full-scale", action="store_true", default=None, dest="full_scale")
    common.add_argument("--epochs", type=int)
    common.add_argument("--runs", type=int, help="control episodes per trained model")
    common.add_argument("--planner", choices=ex.PLANNERS)
    common.add_argument("--beta", type=float)
    common.add_argument("--condition", choices=ex.CONDITIONS)
    common.add_argument("--max-steps", type=int, dest="max_steps")
    common.add_argument("--workers", type=int, help="process pool size for seeds")
    common.add_argument("--trace", action="store_true", default=None, help="write per-cycle planner traces")
    common.add_argument("--out")
    common.add_argument("--config", help="JSON file with any of the settings above")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="affordance-maps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate exploration datasets")
    p = sub.add_parser("train", parents=[common], help="train one model per context size and seed")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    sub.add_parser("control", parents=[common], help="run goal-directed episodes, write metrics.csv")
    p = sub.add_parser("render", parents=[common], help="write affordance-map images")
    p.add_argument("--no-series", action="store_true", help="skip the per-epoch image series")
    sub.add_parser("report", parents=[common], help="aggregate metrics.csv into summary.csv")
    return parser


_SETTING_KEYS = ("experiment", "dim_c", "seeds", "scale", "full_scale", "epochs", "runs", "planner",
                 "beta", "condition", "max_steps", "workers", "out", "trace")


def config_from_args(args):
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
        if not isinstance(base, dict):
            raise ex.UsageError("--config must hold a JSON object")
    for key in _SETTING_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return ex.ExperimentConfig.from_dict(base).resolved()


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
    except (ex.UsageError, TypeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "gen-data":
            outputs = ex.generate_data(cfg)
        elif args.command == "train":
            outputs = ex.train_models(cfg, resume=args.resume)
        elif args.command == "control":
            path, rows = ex.run_control(cfg)
            outputs = [path]
            print(f"wrote {len(rows)} episodes to {path}")
        elif args.command == "render":
            outputs = ex.run_render(cfg, series=not args.no_series)
        else:
            path, summary = ex.run_report(cfg)
            outputs = [path]
            print(ex.format_report(summary))
    except Exception as exc:  # any failure after a valid configuration is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = ex.write_manifest(cfg, args.command, outputs)
    if args.command in ("gen-data", "train", "render"):
        print(f"wrote {len(outputs)} files; manifest {manifest}")
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
