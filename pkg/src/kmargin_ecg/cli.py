"""Command-line entry point: ``kmargin-ecg {synth,augment,train,predict,evaluate,sweep}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import kmargin
from .augmentation import AugmentConfig, augment_dataset, stride_report
from .classifier import ConfigError, TrainingError, load_checkpoint
from .config import RunConfig, parse_value, read_config_file, write_config_file
from .metrics import confusion, metric_rows
from .pipeline import record_probs, run_experiment, write_confusion, write_metrics, write_run_outputs
from .signal_io import (
    DataFormatError,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    load_predictions,
    make_classes,
    save_predictions,
    write_dataset,
)

log = logging.getLogger("kmargin_ecg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SWEEP_PARAMS = {"K": "k", "window_size": "window_size", "MS": "max_stride", "n_split": "n_split"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers `lo,hi`, got {text!r}")
    return vals[0], vals[1]


# ---------------------------------------------------------------------------
# run config from file + flags

_FLAG_KEYS = {
    "window": "window_size",
    "max_stride": "max_stride",
    "k": "k",
    "n_split": "n_split",
    "warmup_epochs": "warmup_epochs",
    "select_epochs": "select_epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "split": "split",
    "seed": "seed",
    "stride": "infer_stride",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--preset", choices=["full", "toy"], help="base defaults before the config file")
    p.add_argument("--window", type=int)
    p.add_argument("--max-stride", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-split", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--select-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--stride", type=int, help="evaluation stride (default: max stride)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")


def build_run_config(args) -> RunConfig:
    cfg = RunConfig.toy() if args.preset == "toy" else RunConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = read_config_file(args.config, cfg)
    updates = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        updates[key.strip()] = parse_value(key.strip(), value)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            updates[key] = v
    return cfg.with_updates(**updates).validate()


def _setup_log_file(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kmargin_ecg")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    counts = tuple(args.counts)
    if sum(counts) == 0:
        raise ConfigError("--counts must include at least one record")
    codes = tuple(args.codes.split(","))
    spec = SynthSpec(
        counts=counts,
        length_range=args.length,
        noise_burst_fraction=args.noise,
        noise_burst_len=args.burst_len,
        seed=args.seed,
        codes=codes,
    )
    manifest = write_dataset(generate_synthetic(spec), args.out)
    print(manifest)
    return EXIT_OK


def cmd_augment(args) -> int:
    ds = load_dataset(args.data)
    arrays = augment_dataset(ds, AugmentConfig(args.window, args.max_stride))
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["record_id", "class", "T", "stride"])
        w.writerows(stride_report(arrays))
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    ds = load_dataset(args.data)
    if len(ds) == 0:
        raise ConfigError(f"{args.data}: manifest lists no records")
    if len(cfg.codes) != ds.num_classes:
        cfg = cfg.with_updates(codes=tuple(c.code for c in ds.classes)).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _setup_log_file(out / "train.log")
    try:
        log.info("training on %d records with %s", len(ds), cfg)
        result = run_experiment(ds, cfg)
        write_run_outputs(out, ds, cfg, result)
        write_config_file(cfg, out / "run_config.cfg")
        log.info("metrics: %s", result.metrics)
    finally:
        logging.getLogger("kmargin_ecg").removeHandler(handler)
        handler.close()
    for name, value in result.metrics:
        print(f"{name},{value:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    if args.window is not None and args.window != model.window_size:
        raise ConfigError(f"--window {args.window} does not match the model window {model.window_size}")
    if args.k < 1 or args.stride < 1:
        raise ConfigError("--k and --stride must be >= 1")
    ds = load_dataset(args.data)
    if ds.num_classes != model.num_classes:
        raise ConfigError(f"manifest has {ds.num_classes} classes, model has {model.num_classes}")
    probs = record_probs(model, ds, model.window_size, args.stride)
    pairs = [(r.id, ds.classes[kmargin.predict_from_probs(p, args.k)]) for r, p in zip(ds.records, probs)]
    save_predictions(args.out, pairs)
    return EXIT_OK


def _read_truth(path: Path):
    """Truth labels from a manifest or from an ``id,code`` file."""
    with open(path, encoding="utf-8") as fh:
        head = fh.read(4096)
    if head.startswith("#classes=") or head.startswith("id,relpath"):
        ds = load_dataset(path)
        if any(r.label is None for r in ds.records):
            raise ConfigError(f"{path}: every truth record needs a label")
        return list(ds.classes), [(r.id, r.label) for r in ds.records]
    classes = make_classes()
    return classes, load_predictions(path, classes)


def cmd_evaluate(args) -> int:
    classes, truth = _read_truth(Path(args.truth))
    pred = dict((rid, c) for rid, c in load_predictions(args.pred, classes))
    missing = [rid for rid, _ in truth if rid not in pred]
    if missing:
        raise ConfigError(f"{args.pred}: no prediction for {len(missing)} record(s), e.g. {missing[0]!r}")
    y_true = [c.index for _, c in truth]
    y_pred = [pred[rid].index for rid, _ in truth]
    codes = [c.code for c in classes]
    rows = metric_rows(y_true, y_pred, codes, paper_formulas=args.paper_formulas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", rows)
    write_confusion(out / "confusion.csv", confusion(y_true, y_pred, len(codes)).counts, codes)
    for name, value in rows:
        print(f"{name},{value:.6f}")
    return EXIT_OK


def run_sweep(ds, cfg: RunConfig, param: str, values) -> list[tuple]:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_PARAMS[param]
    runs = [cfg.with_updates(**{key: v}).validate() for v in values]
    rows = []
    for v, run_cfg in zip(values, runs):
        res = run_experiment(ds, run_cfg)
        m = dict(res.metrics)
        rows.append((v, m["precision"], m["recall"], m.get("F1NAOP", m["macro_f1"]), m["hamming_loss"]))
        log.info("sweep %s=%s -> %s", param, v, rows[-1])
    return rows


def cmd_sweep(args) -> int:
    cfg = build_run_config(args)
    ds = load_dataset(args.data)
    if len(cfg.codes) != ds.num_classes:
        cfg = cfg.with_updates(codes=tuple(c.code for c in ds.classes)).validate()
    rows = run_sweep(ds, cfg, args.param, args.values)
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["value", "precision", "recall", "F1NAOP", "hamming"])
        for row in rows:
            w.writerow([row[0], *[repr(float(v)) for v in row[1:]]])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kmargin-ecg", description="K-margin segment voting for single-lead ECG records.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--counts", type=_int_list, required=True, help="records per class, e.g. 8,1,4,1")
    p.add_argument("--codes", default="N,A,O,P")
    p.add_argument("--length", type=_pair, default=(7000, 12000), help="record length range lo,hi")
    p.add_argument("--noise", type=float, default=0.0, help="noise burst fraction in [0,1]")
    p.add_argument("--burst-len", type=_pair, default=(300, 900))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="report per-record segment counts")
    p.add_argument("--data", type=Path, required=True, help="manifest CSV")
    p.add_argument("--window", type=int, default=6000)
    p.add_argument("--max-stride", type=int, default=500)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="split, augment, train and evaluate")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label records with a trained checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int, default=500)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics for a prediction file")
    p.add_argument("--truth", type=Path, required=True, help="manifest or id,code CSV")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--paper-formulas", action="store_true", help="also report swapped-denominator precision/recall")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="retrain over values of one hyper-parameter")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--param", required=True, help="one of K, window_size, MS, n_split")
    p.add_argument("--values", type=_int_list, required=True)
    p.add_argument("--out", type=Path)
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
