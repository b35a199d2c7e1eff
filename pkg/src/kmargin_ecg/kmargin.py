"""Margin-based segment selection, alpha-gated fine-tuning and top-K voting.

Margins follow ``P(second) - P(first)``, so they are <= 0 and the *least*
(most negative) margin marks the most confident segment.  Every tie breaks
toward the lower segment index or the earlier-selected segment.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import classifier as clf_mod
from .augmentation import SegmentArray, slide_and_cut
from .classifier import RcrModel, SegmentClassifier, predict_batch
from .signal_io import EcgRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentPrediction:
    index: int
    prob: np.ndarray
    top1: int
    top2: int
    margin: float


@dataclass(frozen=True)
class KSelection:
    indices: tuple[int, ...]
    labels: tuple[int, ...]
    num_classes: int

    @property
    def onehot(self) -> np.ndarray:
        """K x m indicator matrix; row k marks the label of the k-th selected segment."""
        out = np.zeros((len(self.labels), self.num_classes), dtype=np.int64)
        out[np.arange(len(self.labels)), self.labels] = 1
        return out


@dataclass(frozen=True)
class AlphaGate:
    alpha: float
    confident: bool  # True when alpha > 0.5 (top-K branch)
    indices: tuple[int, ...]

    @property
    def branch(self) -> str:
        return "topk" if self.confident else "complement"


def _top2(p: np.ndarray) -> tuple[int, int]:
    top1 = int(np.argmax(p))
    rest = p.copy()
    rest[top1] = -np.inf
    return top1, int(np.argmax(rest))


def margin(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.size < 2:
        raise ValueError("margin needs at least two classes")
    top1, top2 = _top2(p)
    return float(p[top2] - p[top1])


def segment_predictions(probs) -> list[SegmentPrediction]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError("expected a (T, m) probability table with m >= 2")
    out = []
    for t, p in enumerate(probs):
        top1, top2 = _top2(p)
        out.append(SegmentPrediction(t, p, top1, top2, float(p[top2] - p[top1])))
    return out


def least_margin_segment(preds: Sequence[SegmentPrediction]) -> int:
    """Position in ``preds`` of the smallest margin (first one on ties)."""
    if not preds:
        raise ValueError("no segment predictions")
    best = 0
    for i in range(1, len(preds)):
        if preds[i].margin < preds[best].margin:
            best = i
    return best


def most_confident_label(preds: Sequence[SegmentPrediction]) -> int:
    return preds[least_margin_segment(preds)].top1


def k_labels_from_predictions(preds: Sequence[SegmentPrediction], k: int) -> KSelection:
    """K rounds of: take the least-margin remaining segment, record its label, remove it."""
    if not 1 <= k <= len(preds):
        raise ValueError(f"K must lie in [1, T={len(preds)}], got {k}")
    remaining = list(preds)
    indices, labels = [], []
    for _ in range(k):
        j = least_margin_segment(remaining)
        chosen = remaining.pop(j)
        indices.append(chosen.index)
        labels.append(chosen.top1)
    return KSelection(tuple(indices), tuple(labels), preds[0].prob.size)


def k_labels_from_probs(probs, k: int) -> KSelection:
    return k_labels_from_predictions(segment_predictions(probs), k)


def k_labels(segments: SegmentArray, k: int, clf: SegmentClassifier) -> KSelection:
    return k_labels_from_probs(predict_batch(clf, segments.segments), k)


def alpha(preds: Sequence[SegmentPrediction]) -> float:
    """Mean top-1 probability over the record's segments."""
    if not preds:
        raise ValueError("no segment predictions")
    return float(np.mean([p.prob[p.top1] for p in preds]))


def alpha_gate_from_probs(probs, k: int) -> AlphaGate:
    preds = segment_predictions(probs)
    a = alpha(preds)
    top = k_labels_from_predictions(preds, k).indices
    if a > 0.5:
        return AlphaGate(a, True, tuple(top))
    chosen = set(top)
    rest = tuple(t for t in range(len(preds)) if t not in chosen)
    if not rest:
        warnings.warn(
            f"alpha={a:.4f} <= 0.5 but K equals T={len(preds)}; using every segment",
            RuntimeWarning,
            stacklevel=2,
        )
        rest = tuple(range(len(preds)))
    return AlphaGate(a, False, rest)


def select_alpha_segments(segments: SegmentArray, k: int, clf: SegmentClassifier) -> AlphaGate:
    return alpha_gate_from_probs(predict_batch(clf, segments.segments), k)


def vote(sel: KSelection) -> int:
    """Most frequent label; ties go to the tied class selected earliest."""
    counts = sel.onehot.sum(axis=0)
    best = counts.max()
    for label in sel.labels:
        if counts[label] == best:
            return int(label)
    raise ValueError("empty selection")


def predict_from_probs(probs, k: int) -> int:
    probs = np.asarray(probs)
    return vote(k_labels_from_probs(probs, min(k, probs.shape[0])))


def predict_record(record: EcgRecord, clf: SegmentClassifier, w: int, stride: int, k: int) -> int:
    """Cut, score every segment, keep the K most confident and vote.  K is clamped to T."""
    if k < 1:
        raise ValueError("K must be >= 1")
    arr = slide_and_cut(record, w, stride)
    return predict_from_probs(predict_batch(clf, arr.segments), k)


# ---------------------------------------------------------------------------
# Two-phase training


@dataclass(frozen=True)
class TrainConfig:
    k: int = 3
    warmup_epochs: int = 5
    select_epochs: int = 3
    lr: float = 0.01
    batch_size: int = 32
    clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.warmup_epochs < 0 or self.select_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class SelectionEntry:
    epoch: int
    record_id: str
    alpha: float
    branch: str
    indices: tuple[int, ...]


@dataclass
class TrainResult:
    model: RcrModel
    loss_trace: list[float]  # one entry per epoch, warm-up first
    selections: list[SelectionEntry]


def flatten(arrays: Sequence[SegmentArray]) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([a.segments for a in arrays], axis=0)
    y = np.concatenate([a.labels() for a in arrays])
    return x, y


def train_with_selection(
    model: RcrModel,
    arrays: Sequence[SegmentArray],
    cfg: TrainConfig,
    selector: SegmentClassifier | None = None,
) -> TrainResult:
    """Warm up on every segment, then fine-tune on alpha-selected segments only.

    During each selection epoch the selected set of every record is recomputed
    with ``selector`` (default: the model being trained).  The selection-phase
    loss averages each record's selected segments first and then averages over
    records, so every record weighs the same regardless of how many segments
    it contributes.
    """
    if not arrays:
        raise ValueError("no segment arrays to train on")
    w = arrays[0].window_size
    if any(a.window_size != w for a in arrays) or w != model.window_size:
        raise ValueError("segment width does not match the model window")
    x_all, y_all = flatten(arrays)
    trace: list[float] = []
    if cfg.warmup_epochs:
        _, t = clf_mod.train(
            model, x_all, y_all, cfg.warmup_epochs, cfg.lr, cfg.batch_size, cfg.seed, clip=cfg.clip
        )
        trace.extend(t)

    selections: list[SelectionEntry] = []
    n_rec = len(arrays)
    for epoch in range(cfg.select_epochs):
        scorer = selector if selector is not None else model
        xs, ys, ws = [], [], []
        for arr in arrays:
            k = min(cfg.k, len(arr))
            gate = select_alpha_segments(arr, k, scorer)
            selections.append(SelectionEntry(epoch, arr.record_id, gate.alpha, gate.branch, gate.indices))
            idx = np.asarray(gate.indices, dtype=np.int64)
            xs.append(arr.segments[idx])
            ys.append(arr.labels()[idx])
            ws.append(np.full(idx.size, 1.0 / idx.size))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        # mean weight 1 over the pool -> epoch loss is the mean over records of per-record means
        wts = np.concatenate(ws) * (x.shape[0] / n_rec)
        _, t = clf_mod.train(
            model, x, y, 1, cfg.lr, cfg.batch_size, cfg.seed + 1 + epoch, weights=wts, clip=cfg.clip
        )
        trace.extend(t)
        log.info("selection epoch %d: %d segments, loss %.5f", epoch, x.shape[0], t[0])
    return TrainResult(model, trace, selections)
