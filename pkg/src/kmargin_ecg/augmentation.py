"""Skewness-driven slide-and-cut augmentation.

Rare classes get a shorter stride so that each of their records yields more
fixed-width segments than a record of a common class of the same length.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signal_io import Dataset, EcgRecord, RhythmClass


@dataclass(frozen=True)
class AugmentConfig:
    window_size: int = 6000
    max_stride: int = 500

    def __post_init__(self):
        if self.window_size < 1 or self.max_stride < 1:
            raise ValueError("window_size and max_stride must be >= 1")


@dataclass(frozen=True, eq=False)
class SegmentArray:
    record_id: str
    segments: np.ndarray  # (T, w)
    offsets: np.ndarray  # (T,)
    label: RhythmClass | None
    pad_len: int = 0
    stride: int = 0

    def __post_init__(self):
        self.segments.flags.writeable = False
        self.offsets.flags.writeable = False

    def __len__(self) -> int:
        return self.segments.shape[0]

    @property
    def window_size(self) -> int:
        return self.segments.shape[1]

    def labels(self) -> np.ndarray:
        """Per-segment labels: the record's label repeated T times."""
        if self.label is None:
            raise ValueError(f"record {self.record_id!r} is unlabeled")
        return np.full(len(self), self.label.index, dtype=np.int64)


def compute_strides(class_counts: Sequence[int], max_stride: int) -> np.ndarray:
    """``ceil(MS * count_c / max_count)`` per class; empty classes get ``MS``."""
    counts = np.asarray(class_counts, dtype=np.int64)
    if max_stride < 1:
        raise ValueError("max_stride must be >= 1")
    if counts.size == 0 or counts.max() < 1:
        raise ValueError("at least one class needs a record")
    if counts.min() < 0:
        raise ValueError("class counts must be >= 0")
    top = int(counts.max())
    # integer ceil avoids float rounding on exact ratios
    strides = [-(-max_stride * int(c) // top) if c > 0 else max_stride for c in counts]
    return np.asarray(strides, dtype=np.int64)


def segment_count(length: int, w: int, s: int) -> int:
    return 1 if length < w else (length - w) // s + 1


def slide_and_cut(record: EcgRecord, w: int, s: int) -> SegmentArray:
    if w < 1 or s < 1:
        raise ValueError("window and stride must be >= 1")
    x = record.samples
    n = x.size
    if n == 0:
        raise ValueError(f"record {record.id!r} is empty")
    if n < w:
        seg = np.zeros((1, w))
        seg[0, :n] = x
        return SegmentArray(record.id, seg, np.zeros(1, dtype=np.int64), record.label, w - n, s)
    t = segment_count(n, w, s)
    offsets = np.arange(t, dtype=np.int64) * s
    windows = np.lib.stride_tricks.sliding_window_view(x, w)[::s][:t]
    return SegmentArray(record.id, np.array(windows), offsets, record.label, 0, s)


def augment_dataset(ds: Dataset, cfg: AugmentConfig) -> list[SegmentArray]:
    if len(ds) == 0:
        raise ValueError("cannot augment an empty dataset")
    if any(r.label is None for r in ds.records):
        raise ValueError("augmentation needs labeled records")
    strides = compute_strides(ds.class_counts(), cfg.max_stride)
    return [slide_and_cut(r, cfg.window_size, int(strides[r.label.index])) for r in ds.records]


def fixed_stride_arrays(records: Sequence[EcgRecord], w: int, s: int) -> list[SegmentArray]:
    """Inference-time cutting with one stride for every record."""
    return [slide_and_cut(r, w, s) for r in records]


def stride_report(arrays: Sequence[SegmentArray]) -> list[tuple[str, str, int, int]]:
    return [
        (a.record_id, a.label.code if a.label is not None else "", len(a), a.stride)
        for a in arrays
    ]

