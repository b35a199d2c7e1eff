"""End-to-end runs: split -> augment -> two-phase training -> record-level evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kmargin
from .augmentation import AugmentConfig, augment_dataset, fixed_stride_arrays
from .classifier import RcrModel, SegmentClassifier, build_model, predict_batch, save_checkpoint
from .config import RunConfig
from .metrics import confusion, metric_rows
from .signal_io import Dataset, save_predictions


def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Record-level split keeping ``fraction`` of each class for training.

    A class with two or more records always keeps at least one record on each
    side; a singleton class stays in training.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n = idx.size
        n_test = 0 if n < 2 else min(n - 1, max(1, round((1.0 - fraction) * n)))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return sorted(train), sorted(test)


@dataclass
class RunResult:
    model: RcrModel
    loss_trace: list[float]
    selections: list[kmargin.SelectionEntry]
    train_ids: list[str]
    test_ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray
    metrics: list[tuple[str, float]]
    segment_probs: list[np.ndarray]  # per test record, (T, m)


def record_probs(clf: SegmentClassifier, ds: Dataset, w: int, stride: int) -> list[np.ndarray]:
    return [predict_batch(clf, a.segments) for a in fixed_stride_arrays(ds.records, w, stride)]


def run_experiment(ds: Dataset, cfg: RunConfig) -> RunResult:
    cfg.validate()
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    codes = tuple(c.code for c in ds.classes)
    labels = ds.labels()
    train_idx, test_idx = stratified_split(labels, cfg.split, cfg.seed)
    train_ds, test_ds = ds.subset(train_idx), ds.subset(test_idx)
    arrays = augment_dataset(train_ds, AugmentConfig(cfg.window_size, cfg.max_stride))
    model = build_model(cfg.model_config(len(codes)))
    tcfg = kmargin.TrainConfig(
        k=cfg.k,
        warmup_epochs=cfg.warmup_epochs,
        select_epochs=cfg.select_epochs,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        clip=cfg.clip,
        seed=cfg.seed,
    )
    res = kmargin.train_with_selection(model, arrays, tcfg)
    probs = record_probs(model, test_ds, cfg.window_size, cfg.eval_stride)
    y_true = test_ds.labels()
    y_pred = np.array([kmargin.predict_from_probs(p, cfg.k) for p in probs], dtype=np.int64)
    metrics = metric_rows(y_true, y_pred, codes) if len(test_ds) else []
    return RunResult(
        model, res.loss_trace, res.selections,
        [r.id for r in train_ds.records], [r.id for r in test_ds.records],
        y_true, y_pred, metrics, probs,
    )


# ---------------------------------------------------------------------------
# Report writers (CSV, LF line endings)


def _writer(path):
    fh = open(path, "w", encoding="utf-8", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_metrics(path, rows: Sequence[tuple[str, float]]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, repr(float(value))])


def write_confusion(path, cm_counts: np.ndarray, codes: Sequence[str]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["true\\pred", *codes])
        for code, row in zip(codes, cm_counts):
            w.writerow([code, *[int(v) for v in row]])


def write_loss_trace(path, trace: Sequence[float], warmup_epochs: int) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["epoch", "phase", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, "warmup" if i < warmup_epochs else "select", repr(float(loss))])


def write_selection_report(path, entries: Sequence[kmargin.SelectionEntry]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["epoch", "record_id", "alpha", "branch", "selected_indices"])
        for e in entries:
            w.writerow([e.epoch, e.record_id, repr(float(e.alpha)), e.branch, " ".join(map(str, e.indices))])


def write_run_outputs(out_dir, ds: Dataset, cfg: RunConfig, result: RunResult) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codes = [c.code for c in ds.classes]
    paths = {
        "checkpoint": out_dir / "model.ckpt",
        "loss_trace": out_dir / "loss_trace.csv",
        "selection": out_dir / "selection_report.csv",
        "split": out_dir / "split.csv",
        "predictions": out_dir / "test_predictions.csv",
        "metrics": out_dir / "metrics.csv",
        "confusion": out_dir / "confusion.csv",
    }
    save_checkpoint(result.model, paths["checkpoint"])
    write_loss_trace(paths["loss_trace"], result.loss_trace, cfg.warmup_epochs)
    write_selection_report(paths["selection"], result.selections)
    fh, w = _writer(paths["split"])
    with fh:
        w.writerow(["record_id", "split"])
        test = set(result.test_ids)
        for r in ds.records:
            w.writerow([r.id, "test" if r.id in test else "train"])
    save_predictions(paths["predictions"], [(rid, ds.classes[int(p)]) for rid, p in zip(result.test_ids, result.y_pred)])
    write_metrics(paths["metrics"], result.metrics)
    write_confusion(paths["confusion"], confusion(result.y_true, result.y_pred, len(codes)).counts, codes)
    return paths
