"""Command-line entry point.

Exit status: 0 success, 2 config error, 3 data or checkpoint format error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .adapt import VARIANTS, AdaptConfig, accuracy, adapt, train_source
from .harness import ConfigError
from .nn_core import CheckpointError, load_checkpoint, save_checkpoint
from .signal_sim import DatasetFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("scrffi")


def _print_rows(rows):
    for s in harness.summarize(rows):
        print(f"{s['task']:<28} {s['variant']:<12} {s['accuracy_mean']:7.2f} "
              f"+- {s['accuracy_std']:5.2f}  (final {s['final_accuracy_mean']:6.2f}, "
              f"{s['n_seeds']} seeds)")


def cmd_generate(args):
    cfg = harness.load_config(args.config, args.output_dir)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "data"
    data = harness.materialize(cfg, out)
    for name in ("source", "source_test", "target", "target_eval"):
        counts = data.counts[name]
        print(f"{name:<12} {sum(counts):6d} records  per-class {counts}  "
              f"sha256 {data.hashes[name][:16]}")
    print(f"target labels sidecar: {data.target_labels}")
    return EXIT_OK


def cmd_train_source(args):
    x, y, K = harness.load_arrays(args.data)
    model = train_source((x, y), epochs=args.epochs, lr=args.lr, seed=args.seed,
                         batch_size=args.batch_size, num_classes=K)
    save_checkpoint(model, args.out)
    print(f"source model -> {args.out}  train accuracy "
          f"{100 * accuracy(load_checkpoint(args.out), x, y):.2f}%")
    return EXIT_OK


def _adapt_config(args) -> AdaptConfig:
    if args.config:
        cfg = harness.load_config(args.config).adapt
    else:
        cfg = AdaptConfig()
    return replace(cfg, seed=args.seed)


def cmd_adapt(args):
    cfg = _adapt_config(args)
    model = load_checkpoint(args.model)
    x, _, K = harness.load_arrays(args.target)
    if K != model.arch.num_classes:
        raise CheckpointError(f"model has {model.arch.num_classes} classes, data has {K}")
    ev = None
    if args.eval:
        ev = harness.load_arrays(args.eval, args.eval_labels)[:2]
    adapted, reps = adapt(model, x, cfg, args.variant, eval_set=ev)
    save_checkpoint(adapted, args.out)
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reps)
    if args.trace:
        harness.atomic_write(args.trace, lines)
    else:
        sys.stdout.write(lines)
    print(f"adapted model -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args):
    model = load_checkpoint(args.model)
    x, y, K = harness.load_arrays(args.data, args.labels)
    if K != model.arch.num_classes:
        raise CheckpointError(f"model has {model.arch.num_classes} classes, data has {K}")
    if np.any(y < 0):
        raise DatasetFormatError("evaluation needs labels (labeled file or --labels sidecar)")
    print(f"accuracy {100 * accuracy(model, x, y):.2f}% on {len(y)} records")
    return EXIT_OK


def _finish(rows, out_dir, name):
    res, summ = harness.write_tables(rows, out_dir, name)
    _print_rows(rows)
    print(f"tables: {res} {summ}")
    return EXIT_OK


def cmd_run(args):
    cfg = harness.load_config(args.config, args.output_dir, args.workers)
    return _finish(harness.run_experiment(cfg), cfg.output_dir, "results")


def cmd_ablate(args):
    cfg = harness.load_config(args.config, args.output_dir, args.workers)
    return _finish(harness.run_ablation(cfg), cfg.output_dir, "ablation")


def cmd_sweep(args):
    cfg = harness.load_config(args.config, args.output_dir, args.workers)
    values = [v for v in args.values.split(",") if v.strip()] if args.values else []
    if args.axis == "snr" and args.range:
        lo, hi, step = args.range
        values = [f"{v:g}" for v in np.arange(lo, hi + step / 2, step)]
    rows = harness.run_sweep(cfg, args.axis, values)
    return _finish(rows, cfg.output_dir, f"sweep_{args.axis}")


def cmd_export_features(args):
    model = load_checkpoint(args.model)
    x, y, K = harness.load_arrays(args.data, args.labels)
    if K != model.arch.num_classes or x.shape[2] != model.arch.length:
        raise CheckpointError("model architecture does not match the dataset")
    n, d = harness.export_features(model, x, y, args.out)
    print(f"{n} rows x {d + 1} columns -> {args.out}")
    return EXIT_OK


def cmd_verify_results(args):
    problems = harness.verify_results(args.dir, args.name)
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return EXIT_OK if not problems else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scrffi", description="Cross-receiver RF fingerprint "
                                "adaptation experiments on synthetic IQ data.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def exp_cmd(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--output-dir", help="overrides output_dir and $" + harness.ENV_OUTPUT_DIR)
        s.add_argument("--workers", type=int, help="overrides workers and $" + harness.ENV_WORKERS)
        s.set_defaults(fn=fn)
        return s

    s = sub.add_parser("generate", help="write SCRF datasets described by a config")
    s.add_argument("config")
    s.add_argument("--out", help="directory (default: <output_dir>/data)")
    s.add_argument("--output-dir")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("train-source", help="supervised training on a labeled SCRF file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=harness.SOURCE_EPOCHS)
    s.add_argument("--lr", type=float, default=harness.SOURCE_LR)
    s.add_argument("--batch-size", type=int, default=64)
    s.set_defaults(fn=cmd_train_source)

    s = sub.add_parser("adapt", help="adapt a source checkpoint to unlabeled target data")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="take adaptation settings from this config")
    s.add_argument("--variant", default="ms_shot", choices=sorted(VARIANTS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval", help="labeled target file for per-epoch accuracy")
    s.add_argument("--eval-labels", help="label sidecar for --eval")
    s.add_argument("--trace", help="JSONL trace path (default: stdout)")
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("evaluate", help="accuracy of a checkpoint on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels", help="label sidecar for an unlabeled file")
    s.set_defaults(fn=cmd_evaluate)

    exp_cmd("run", cmd_run, "train, adapt and evaluate every variant x seed cell")
    exp_cmd("ablate", cmd_ablate, "the five component-ablation rows on shared data")
    s = exp_cmd("sweep", cmd_sweep, "one-factor-at-a-time sweep")
    s.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--range", type=float, nargs=3, metavar=("LO", "HI", "STEP"),
                   help="inclusive SNR range in dB (snr axis only)")

    s = sub.add_parser("export-features", help="eval-mode features as delimited text")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_features)

    s = sub.add_parser("verify-results", help="recompute table rows from traces")
    s.add_argument("dir")
    s.add_argument("--name", default="results", help="table stem, e.g. ablation or sweep_snr")
    s.set_defaults(fn=cmd_verify_results)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
