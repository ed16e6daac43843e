"""Command-line entry point: ``bregnet {gradcheck,train,eval,metrics}``.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage or
configuration error, 3 I/O error.
"""

import argparse
import csv
import json
import logging
import os
import sys
import warnings

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .config import DataSpec, load_data, load_run_config, resolve_network
from .data import (
    CATEGORICAL,
    DIMENSIONAL,
    FER2013_HEADER,
    channel_stats,
    load_fer2013_csv,
    load_manifest,
    load_predictions,
    write_predictions,
)
from .errors import BregError, ConfigError, ContractError, DataFormatError, NumericalError
from .metrics import DEFAULT_TRIALS, UNDEFINED, categorical_report, dimensional_report
from .model import CLASSIFICATION, build_network, clamp_dimensional, load_checkpoint, predict, save_checkpoint
from .training import TRACE_COLUMNS, OptimizerState, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

CHECKPOINT_NAME = "model.breg"
TRACE_NAME = "trace.csv"
CONFIG_ECHO_NAME = "config.resolved.json"

log = logging.getLogger("bregnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bregnet", description="Bounded residual gradient networks at desk scale.")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP threads; 1 (default) gives bit-reproducible runs")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0, help="seed for the random check points (default 0)")
    g.add_argument("--tolerance", type=float, default=1e-5,
                   help="maximum allowed relative error (default 1e-5)")

    t = sub.add_parser("train", help="train a network from a run config")
    t.add_argument("--config", required=True, help="run config (.toml or .json)")
    t.add_argument("--data", help="dataset overriding the config: FER2013 CSV, manifest CSV, "
                                  "or a run config whose [data] table is used")
    t.add_argument("--out", required=True, help="output directory (checkpoint, trace, config echo)")
    t.add_argument("--epochs", type=int, help="override the config's epoch count")
    t.add_argument("--seed", type=int, help="override the config's seed")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True, help="checkpoint written by 'train'")
    e.add_argument("--data", required=True, help="FER2013 CSV, manifest CSV or run config")
    e.add_argument("--report", required=True, help="output JSON report")
    e.add_argument("--split", default="val", choices=("train", "val", "test"),
                   help="split to score (default val)")
    e.add_argument("--skew-trials", type=int,
                   help="under-sampling trials for skew normalization (default: the run config's "
                        f"skew_trials when --data is a config, else {DEFAULT_TRIALS})")
    e.add_argument("--seed", type=int, default=0, help="seed for skew normalization (default 0)")
    e.add_argument("--predictions", help="also write the predictions CSV here")

    m = sub.add_parser("metrics", help="metrics straight from a predictions CSV")
    m.add_argument("--pred", required=True, help="predictions CSV (pred,gt or pred_valence,...)")
    m.add_argument("--task", required=True, choices=(CATEGORICAL, DIMENSIONAL))
    m.add_argument("--skew-trials", type=int, default=DEFAULT_TRIALS,
                   help=f"under-sampling trials for skew normalization (default {DEFAULT_TRIALS})")
    m.add_argument("--seed", type=int, default=0, help="seed for skew normalization (default 0)")
    m.add_argument("--report", help="also write the JSON report here")
    return p


# ------------------------------------------------------------------ helpers

def _fmt(v):
    return UNDEFINED if v is None else f"{v:.6f}"


def _print_report(report, out=None):
    out = sys.stdout if out is None else out
    d = report.to_dict()["metrics"]
    names = [k for k in d if not k.endswith("_norm")]
    has_norm = any(f"{k}_norm" in d for k in names)
    out.write(f"{'metric':<16}{'orig':>12}" + (f"{'norm':>12}" if has_norm else "") + "\n")
    for k in names:
        line = f"{k:<16}{_fmt(report.values[k][0]):>12}"
        if has_norm:
            line += f"{_fmt(report.values[k][1]):>12}"
        out.write(line + "\n")


def _read_header(path):
    with open(path, newline="") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def load_splits(path, seed=0):
    """Datasets from a CSV (FER2013 or manifest) or from a run config's [data] table."""
    if path.endswith((".toml", ".json")):
        run = load_run_config(path)
        train_split, val_split = load_data(run.data, run.seed if seed is None else seed)
        return {"train": train_split, "val": val_split}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if _read_header(path) == FER2013_HEADER:
        return load_fer2013_csv(path)
    return load_manifest(path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# ----------------------------------------------------------------- commands

def cmd_gradcheck(args):
    rows = gradcheck.run_suite(args.seed)
    width = max(len(name) for name, _ in rows)
    print(f"{'op':<{width}}  {'max rel error':>14}  status")
    failed = []
    for name, err in rows:
        ok = err < args.tolerance
        if not ok:
            failed.append(name)
        print(f"{name:<{width}}  {err:>14.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed (tolerance {args.tolerance:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(rows)} checks below {args.tolerance:g}")
    return EXIT_OK


def cmd_train(args):
    run = load_run_config(args.config)
    if args.epochs is not None:
        run.epochs = args.epochs
    if args.seed is not None:
        run.seed = args.seed
    if args.data:
        if args.data.endswith((".toml", ".json")):
            run.data = load_run_config(args.data).data
        else:
            fmt = "fer2013" if _read_header(args.data) == FER2013_HEADER else "manifest"
            run.data = DataSpec(format=fmt, path=os.path.abspath(args.data))
    train_data, val_data = load_data(run.data, run.seed)
    net_cfg = resolve_network(run, train_data)
    net = build_network(net_cfg)
    if net_cfg.standardize_input:
        net.buffers["input.mean"], net.buffers["input.std"] = channel_stats(train_data)
    run.network = {k: v for k, v in net_cfg.to_dict().items() if k != "seed"}

    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, CONFIG_ECHO_NAME), run.to_dict())
    trace_path = os.path.join(args.out, TRACE_NAME)
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)

        def on_epoch(r):
            writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])
            fh.flush()
            print(f"epoch {r.epoch:>3}  train_loss {r.train_loss:.5f}  train_metric {r.train_metric:.4f}  "
                  f"val_loss {r.val_loss:.5f}  val_metric {r.val_metric:.4f}")

        opt = OptimizerState(run.optimizer.lr, run.optimizer.momentum, run.optimizer.weight_decay)
        train(net, train_data, run.loss, opt, run.epochs, run.seed, run.batch_size,
              val_data=val_data, on_epoch=on_epoch)
    save_checkpoint(net, os.path.join(args.out, CHECKPOINT_NAME))
    print(f"wrote {CHECKPOINT_NAME}, {TRACE_NAME} and {CONFIG_ECHO_NAME} to {args.out}")
    return EXIT_OK


def _predict_all(net, data, batch_size=256):
    outs = [predict(net, data.images[i:i + batch_size]).data for i in range(0, len(data), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, net.config.output_dim))


def cmd_eval(args):
    net = load_checkpoint(args.ckpt)
    splits = load_splits(args.data, None)
    data = splits.get(args.split)
    if data is None or not len(data):
        raise ConfigError(f"{args.data}: split {args.split!r} is empty")
    classification = net.config.head == CLASSIFICATION
    if classification != (data.task == CATEGORICAL):
        raise ContractError(f"checkpoint has a {net.config.head} head but the data is {data.task}")
    if classification and data.num_classes > net.config.num_classes:
        raise ContractError(f"data has {data.num_classes} classes, checkpoint head has {net.config.num_classes}")
    trials = args.skew_trials
    if trials is None:
        trials = load_run_config(args.data).skew_trials if args.data.endswith((".toml", ".json")) else DEFAULT_TRIALS
    if trials < 1:
        raise ConfigError("--skew-trials must be >= 1")
    out = _predict_all(net, data)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if classification:
            pred = out.argmax(axis=1)
            report = categorical_report(pred, data.labels, trials, args.seed,
                                        num_classes=net.config.num_classes)
            task = CATEGORICAL
        else:
            pred = clamp_dimensional(out)
            report = dimensional_report(pred, data.labels)
            task = DIMENSIONAL
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.predictions:
        write_predictions(args.predictions, pred, data.labels, task)
    with open(args.report, "w") as fh:
        fh.write(report.to_json())
    _print_report(report)
    return EXIT_OK


def cmd_metrics(args):
    if args.skew_trials < 1:
        raise ConfigError("--skew-trials must be >= 1")
    pred, gt = load_predictions(args.pred, args.task)
    if len(pred) == 0:
        raise ContractError(f"{args.pred}: no predictions")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.task == CATEGORICAL:
            report = categorical_report(pred, gt, args.skew_trials, args.seed)
        else:
            report = dimensional_report(pred, gt)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    _print_report(report)
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval, "metrics": cmd_metrics}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, BregError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
