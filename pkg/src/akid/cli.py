"""``akid`` command line: train, tune, visualize.

Exit status: 0 success, 1 runtime failure, 2 bad config or usage,
3 tune run in which some jobs failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from akid.blocks import ConfigError
from akid.config import apply_overrides, build_kid, dumps, load_config, parse_config
from akid.kid import CheckpointError
from akid.sensor import DatasetMissingError, IntegrityError
from akid.tensor import ShapeError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.akck"

log = logging.getLogger("akid")


def _error(msg: str) -> None:
    print(f"akid: error: {msg}", file=sys.stderr)


def _resolve_config(args, overrides) -> dict:
    config = load_config(args.config)
    config = apply_overrides(config, overrides)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    return parse_config(config)


def cmd_train(args, overrides) -> int:
    config = _resolve_config(args, overrides)
    log_dir = Path(args.log_dir or config["kid"].get("log_dir") or "log")
    kid = build_kid(config, log_dir=log_dir, offline=args.offline)
    kid.setup()
    metrics = kid.practice()
    kid.sink.close()
    kid.save_checkpoint(log_dir / CHECKPOINT_NAME)
    (log_dir / "config.json").write_text(dumps(config))
    (log_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    if not args.no_plots:
        from akid.plotting import render_report

        render_report(log_dir)
    for key in ("clock", "train_loss", "train_accuracy", "val_loss", "val_accuracy"):
        if key in metrics:
            value = metrics[key]
            print(f"{key}: {value}" if isinstance(value, int) else f"{key}: {value:.6f}")
    return EXIT_OK


def cmd_tune(args, overrides) -> int:
    from akid.tuner import TuneSpec, run

    if overrides:
        raise ConfigError(f"tune takes no overrides, got {overrides}")
    spec = TuneSpec.from_file(args.spec)
    if args.num_slots is not None:
        spec.num_slots = args.num_slots
    if args.mode is not None:
        spec.mode = args.mode
    if args.results_dir is not None:
        spec.results_dir = args.results_dir
    report = run(spec)
    print(f"{'job':<14}{'status':<8}{'slot':>5}{'wall_s':>9}{'train_loss':>12}{'val_acc':>9}")
    for job in report.jobs:
        m = job["metrics"]
        loss = f"{m['train_loss']:.4f}" if "train_loss" in m else "-"
        acc = f"{m['val_accuracy']:.4f}" if "val_accuracy" in m else "-"
        slot = "-" if job["slot"] is None else job["slot"]
        print(f"{job['id']:<14}{job['status']:<8}{slot:>5}{job['wall_time']:>9.2f}{loss:>12}{acc:>9}")
        if job["error"]:
            print(f"  {job['error']}")
    print(f"report: {report.path}")
    return EXIT_PARTIAL if report.failed else EXIT_OK


def cmd_visualize(args, overrides) -> int:
    out_dir = Path(args.out_dir)
    if args.what == "summaries":
        from akid.plotting import render_report

        if args.log_dir is None:
            raise ConfigError("--what summaries needs --log-dir")
        paths = render_report(args.log_dir, out_dir)
    else:
        from akid.observer import Observer

        if args.config is None:
            raise ConfigError(f"--what {args.what} needs --config")
        if args.checkpoint is None and args.what != "graph":
            raise ConfigError(f"--what {args.what} needs --checkpoint")
        if args.checkpoint is not None and not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
        config = _resolve_config(args, overrides)
        kid = build_kid(config, offline=args.offline)
        kid.setup()
        if args.checkpoint is not None:
            kid.load_checkpoint(args.checkpoint)
        obs = Observer(kid, out_dir)
        if args.what == "filters":
            paths = obs.visualize_filters()
        elif args.what == "activations":
            paths = obs.visualize_activation()
        else:
            paths = [obs.export_graph()]
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="akid",
        description="Train, tune and inspect block-structured neural networks.",
        epilog="Config overrides: --section.key=value with JSON-literal values, e.g. --engine.num_towers=2",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from an experiment config")
    train.add_argument("--config", required=True, help="experiment config JSON")
    train.add_argument("--log-dir", help="directory for summaries, checkpoint and figures")
    train.add_argument("--seed", type=int, help="override the config's global seed")
    train.add_argument("--offline", action="store_true", help="never download datasets")
    train.add_argument("--no-plots", action="store_true", help="skip PNG figure rendering")
    train.set_defaults(func=cmd_train)

    tune = sub.add_parser("tune", help="run a hyperparameter grid from a tune spec")
    tune.add_argument("spec", help="tune spec JSON")
    tune.add_argument("--num-slots", type=int)
    tune.add_argument("--mode", choices=["inprocess", "subprocess"])
    tune.add_argument("--results-dir")
    tune.set_defaults(func=cmd_tune)

    vis = sub.add_parser("visualize", help="render filters, activations, the graph or summary figures")
    vis.add_argument("--what", choices=["filters", "activations", "graph", "summaries"], required=True)
    vis.add_argument("--config")
    vis.add_argument("--checkpoint")
    vis.add_argument("--log-dir", help="training log directory (for --what summaries)")
    vis.add_argument("--out-dir", default="visualizations")
    vis.add_argument("--seed", type=int)
    vis.add_argument("--offline", action="store_true")
    vis.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = [a for a in extra if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]]
    unknown = [a for a in extra if a not in overrides]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, overrides)
    except ConfigError as e:
        _error(str(e))
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetMissingError, IntegrityError, CheckpointError, ShapeError, ValueError) as e:
        _error(str(e))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
