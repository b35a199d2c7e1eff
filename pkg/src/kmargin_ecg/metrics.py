"""Record-level evaluation metrics derived from a confusion matrix.

Zero denominators contribute 0 to every per-class term, so macro averages are
always taken over the full class count ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

AGGREGATE_CODES = ("N", "A", "O", "P")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        if isinstance(other, ConfusionMatrix):
            return np.array_equal(self.counts, other.counts)
        return np.array_equal(self.counts, np.asarray(other))


def confusion(y_true: Sequence[int], y_pred: Sequence[int], m: int) -> ConfusionMatrix:
    yt = np.asarray(y_true, dtype=np.int64).ravel()
    yp = np.asarray(y_pred, dtype=np.int64).ravel()
    if yt.size != yp.size:
        raise ValueError(f"length mismatch: {yt.size} true vs {yp.size} predicted labels")
    for arr in (yt, yp):
        if arr.size and (arr.min() < 0 or arr.max() >= m):
            raise ValueError(f"label out of range [0, {m})")
    counts = np.zeros((m, m), dtype=np.int64)
    np.add.at(counts, (yt, yp), 1)
    return ConfusionMatrix(counts)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts
    return _safe_div(2 * np.diag(c), c.sum(axis=1) + c.sum(axis=0))


def f1_aggregates(per_class: Sequence[float], codes: Sequence[str] = AGGREGATE_CODES) -> tuple[float, float]:
    """(F1NAO, F1NAOP), looking classes up by code rather than position."""
    per_class = list(per_class)
    if len(per_class) != 4 or len(codes) != 4:
        raise ValueError("F1NAO/F1NAOP need exactly four classes")
    try:
        f = {code: per_class[list(codes).index(code)] for code in AGGREGATE_CODES}
    except ValueError:
        raise ValueError(f"class codes must be a permutation of {AGGREGATE_CODES}, got {list(codes)}") from None
    nao = (f["N"] + f["A"] + f["O"]) / 3
    naop = (f["N"] + f["A"] + f["O"] + f["P"]) / 4
    return nao, naop


def macro_precision_recall(cm: ConfusionMatrix, paper_formulas: bool = False) -> tuple[float, float]:
    """Macro precision and recall.

    With ``paper_formulas`` the two denominators are swapped: precision divides
    each class's hits by its true-class count and recall by its predicted count.
    """
    c = cm.counts
    tp = np.diag(c)
    by_pred = _safe_div(tp, c.sum(axis=0))
    by_true = _safe_div(tp, c.sum(axis=1))
    if paper_formulas:
        by_pred, by_true = by_true, by_pred
    return float(by_pred.mean()), float(by_true.mean())


def accuracy(y_true, y_pred) -> float:
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    if yt.size == 0 or yt.size != yp.size:
        raise ValueError("need equal, nonempty label sequences")
    return float(np.mean(yt == yp))


def hamming_loss(y_true, y_pred, m: int) -> float:
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    if yt.size == 0:
        raise ValueError("hamming loss of an empty prediction set is undefined")
    if yt.size != yp.size:
        raise ValueError("length mismatch")
    return float(np.sum(yt != yp) / m / yt.size)


def metric_rows(y_true, y_pred, codes: Sequence[str], paper_formulas: bool = False) -> list[tuple[str, float]]:
    """All record-level metrics as (name, value) rows, in a fixed order."""
    m = len(codes)
    cm = confusion(y_true, y_pred, m)
    f1 = f1_per_class(cm)
    precision, recall = macro_precision_recall(cm)
    rows = [("precision", precision), ("recall", recall)]
    if paper_formulas:
        pp, pr = macro_precision_recall(cm, paper_formulas=True)
        rows += [("precision_paper", pp), ("recall_paper", pr)]
    rows.append(("accuracy", accuracy(y_true, y_pred)))
    rows.append(("hamming_loss", hamming_loss(y_true, y_pred, m)))
    rows.append(("macro_f1", float(f1.mean())))
    rows += [(f"F1_{code}", float(v)) for code, v in zip(codes, f1)]
    if sorted(codes) == sorted(AGGREGATE_CODES):
        nao, naop = f1_aggregates(f1, codes)
        rows += [("F1NAO", nao), ("F1NAOP", naop)]
    return rows
