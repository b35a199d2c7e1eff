"""Record/dataset types, CSV manifest ingestion, synthetic data and prediction files.

On-disk layout::

    manifest.csv            header ``id,relpath,label_code,sample_rate``
    records/<id>.csv        one sample per line

The class table of a manifest is an optional leading directive line
``#classes=N,A,O,P``; without it the four default codes are used.  An empty
``label_code`` marks an unlabeled record.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_CODES = ("N", "A", "O", "P")
MANIFEST_HEADER = ["id", "relpath", "label_code", "sample_rate"]


class DataFormatError(ValueError):
    """Malformed input file; carries the offending path and line number."""

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class RhythmClass:
    index: int
    code: str


def make_classes(codes: Sequence[str] = DEFAULT_CODES) -> list[RhythmClass]:
    if len(set(codes)) != len(codes):
        raise ValueError(f"duplicate class codes in {list(codes)}")
    if any(not c or "," in c for c in codes):
        raise ValueError(f"invalid class codes {list(codes)}")
    return [RhythmClass(i, c) for i, c in enumerate(codes)]


@dataclass(frozen=True, eq=False)
class EcgRecord:
    id: str
    samples: np.ndarray
    sample_rate: float = 300.0
    label: RhythmClass | None = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).ravel()
        if samples.size < 1:
            raise ValueError(f"record {self.id!r} has no samples")
        if not self.sample_rate > 0:
            raise ValueError(f"record {self.id!r}: sample_rate must be > 0")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.sample_rate == other.sample_rate
            and self.label == other.label
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class Dataset:
    records: tuple[EcgRecord, ...]
    classes: tuple[RhythmClass, ...]
    # record id -> [(start, stop), ...] of injected noise bursts (synthetic data only)
    bursts: Mapping[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "classes", tuple(self.classes))
        if [c.index for c in self.classes] != list(range(len(self.classes))):
            raise ValueError("class indices must be dense 0..m-1")
        if len({c.code for c in self.classes}) != len(self.classes):
            raise ValueError("class codes must be unique")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        known = set(self.classes)
        for r in self.records:
            if r.label is not None and r.label not in known:
                raise ValueError(f"record {r.id!r} has class {r.label} not in the class table")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for r in self.records:
            if r.label is not None:
                counts[r.label.index] += 1
        return counts

    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise ValueError("dataset contains unlabeled records")
        return np.array([r.label.index for r in self.records], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        records = [self.records[i] for i in indices]
        bursts = {r.id: self.bursts[r.id] for r in records if r.id in self.bursts}
        return Dataset(records, self.classes, bursts)

    def class_by_code(self, code: str) -> RhythmClass:
        for c in self.classes:
            if c.code == code:
                return c
        raise KeyError(code)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_samples(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataFormatError(path, None, "signal file not found")
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise DataFormatError(path, lineno, f"non-numeric sample {text!r}") from None
            if not math.isfinite(v):
                raise DataFormatError(path, lineno, f"non-finite sample {text!r}")
            values.append(v)
    if not values:
        raise DataFormatError(path, None, "signal file contains no samples")
    return np.asarray(values, dtype=np.float64)


def load_dataset(manifest_path) -> Dataset:
    """Parse a manifest and every per-record sample file it references."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataFormatError(manifest_path, None, "manifest not found")
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()

    codes = DEFAULT_CODES
    start = 0
    if lines and lines[0].startswith("#classes="):
        codes = tuple(c.strip() for c in lines[0][len("#classes="):].split(","))
        try:
            make_classes(codes)
        except ValueError as exc:
            raise DataFormatError(manifest_path, 1, str(exc)) from None
        start = 1
    classes = make_classes(codes)
    by_code = {c.code: c for c in classes}

    records = []
    seen = set()
    header_seen = False
    for offset, row in enumerate(csv.reader(lines[start:])):
        lineno = start + offset + 1
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        row = [cell.strip() for cell in row]
        if not header_seen:
            if row != MANIFEST_HEADER:
                raise DataFormatError(
                    manifest_path, lineno, f"expected header {','.join(MANIFEST_HEADER)}"
                )
            header_seen = True
            continue
        if len(row) != 4:
            raise DataFormatError(manifest_path, lineno, f"expected 4 fields, got {len(row)}")
        rec_id, relpath, code, rate_text = row
        if not rec_id:
            raise DataFormatError(manifest_path, lineno, "empty record id")
        if rec_id in seen:
            raise DataFormatError(manifest_path, lineno, f"duplicate record id {rec_id!r}")
        seen.add(rec_id)
        if code and code not in by_code:
            raise DataFormatError(manifest_path, lineno, f"unknown class code {code!r}")
        try:
            rate = float(rate_text) if rate_text else 300.0
        except ValueError:
            raise DataFormatError(manifest_path, lineno, f"bad sample_rate {rate_text!r}") from None
        if not rate > 0:
            raise DataFormatError(manifest_path, lineno, f"sample_rate must be > 0, got {rate_text}")
        samples = _read_samples(manifest_path.parent / relpath)
        records.append(EcgRecord(rec_id, samples, rate, by_code[code] if code else None))
    return Dataset(records, classes)


def write_dataset(ds: Dataset, out_dir, records_subdir: str = "records") -> Path:
    """Write ``ds`` as manifest + per-record CSVs; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / records_subdir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#classes=" + ",".join(c.code for c in ds.classes) + "\n")
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        for r in ds.records:
            relpath = f"{records_subdir}/{r.id}.csv"
            code = r.label.code if r.label is not None else ""
            fh.write(f"{r.id},{relpath},{code},{r.sample_rate:g}\n")
            with open(out_dir / relpath, "w", encoding="utf-8", newline="\n") as sf:
                # repr round-trips float64 exactly
                sf.write("\n".join(repr(float(v)) for v in r.samples))
                sf.write("\n")
    if ds.bursts:
        with open(out_dir / "bursts.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("record_id,start,stop\n")
            for r in ds.records:
                for a, b in ds.bursts.get(r.id, ()):
                    fh.write(f"{r.id},{a},{b}\n")
    return manifest


# ---------------------------------------------------------------------------
# Prediction files


def save_predictions(path, pairs: Sequence[tuple[str, RhythmClass]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec_id, cls in pairs:
            fh.write(f"{rec_id},{cls.code}\n")


def load_predictions(path, classes: Sequence[RhythmClass] | None = None) -> list[tuple[str, RhythmClass]]:
    classes = list(classes) if classes is not None else make_classes()
    by_code = {c.code: c for c in classes}
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), start=1):
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataFormatError(path, lineno, "expected `id,code`")
            rec_id, code = parts
            if code not in by_code:
                raise DataFormatError(path, lineno, f"unknown class code {code!r}")
            out.append((rec_id, by_code[code]))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    counts: tuple[int, ...] = (8, 1, 4, 1)
    length_range: tuple[int, int] = (7000, 12000)
    # waveform family per class; None means class k uses family k % 4
    families: tuple[int, ...] | None = None
    noise_burst_fraction: float = 0.0
    noise_burst_len: tuple[int, int] = (300, 900)
    seed: int = 0
    codes: tuple[str, ...] = DEFAULT_CODES
    sample_rate: float = 300.0

    def __post_init__(self):
        if any(int(c) < 0 for c in self.counts):
            raise ValueError("class counts must be >= 0")
        if len(self.counts) != len(self.codes):
            raise ValueError("counts and codes must have the same length")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid length range {self.length_range}")
        if not 0.0 <= self.noise_burst_fraction <= 1.0:
            raise ValueError("noise_burst_fraction must lie in [0, 1]")
        blo, bhi = self.noise_burst_len
        if not 1 <= blo <= bhi:
            raise ValueError(f"invalid burst length range {self.noise_burst_len}")
        if self.families is not None:
            if len(self.families) != len(self.counts):
                raise ValueError("one family id per class required")
            if any(f not in (0, 1, 2, 3) for f in self.families):
                raise ValueError("family ids are 0..3")


def _bump(n: int, centers: np.ndarray, amps: np.ndarray, width: float) -> np.ndarray:
    out = np.zeros(n)
    half = int(4 * width) + 1
    offs = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (offs / width) ** 2)
    for c, a in zip(centers, amps):
        c = int(round(c))
        lo, hi = max(c - half, 0), min(c + half + 1, n)
        if lo < hi:
            out[lo:hi] += a * kernel[lo - (c - half): hi - (c - half)]
    return out


def _beat_times(rng: np.random.Generator, n: int, base: float, irregular: bool) -> np.ndarray:
    t = rng.uniform(0, base)
    times = []
    while t < n:
        times.append(t)
        if irregular:
            t += base * rng.uniform(0.45, 1.55)
        else:
            t += base * (1.0 + rng.uniform(-0.02, 0.02))
    return np.array(times)


def _clean_waveform(rng: np.random.Generator, family: int, n: int) -> np.ndarray:
    base = rng.uniform(55.0, 75.0)
    wander = 0.05 * np.sin(2 * np.pi * np.arange(n) / rng.uniform(600, 1200) + rng.uniform(0, 2 * np.pi))
    floor = rng.normal(0.0, 0.02, n)
    if family == 3:
        return rng.normal(0.0, 0.5, n) + wander
    times = _beat_times(rng, n, base, irregular=family == 1)
    amps = np.ones(times.size)
    if family == 2:
        amps[1::2] = 0.45
    # family 2 also has inverted T waves, a cue visible within a single beat
    t_sign = -1.0 if family == 2 else 1.0
    x = _bump(n, times, amps, 2.0) + _bump(n, times + 16, t_sign * 0.25 * amps, 7.0)
    if family == 1:
        # fibrillatory baseline instead of P waves
        period = rng.uniform(6.0, 9.0)
        x += 0.1 * np.sin(2 * np.pi * np.arange(n) / period + rng.uniform(0, 2 * np.pi))
    else:
        x += _bump(n, times - 12, 0.15 * amps, 3.0)
    return x + wander + floor


def _burst_layout(rng: np.random.Generator, n: int, fraction: float, len_range) -> list[tuple[int, int]]:
    """Non-overlapping bursts covering round(fraction * n) samples in total."""
    total = int(round(fraction * n))
    if total == 0:
        return []
    lo, hi = len_range
    lengths = []
    remaining = total
    while remaining > 0:
        ln = int(rng.integers(lo, hi + 1))
        ln = min(ln, remaining)
        lengths.append(ln)
        remaining -= ln
    free = n - total
    # random composition of the free samples into len(lengths)+1 gaps
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts, [free]]))
    order = rng.permutation(len(lengths))
    bursts = []
    pos = 0
    for k, idx in enumerate(order):
        pos += int(gaps[k])
        bursts.append((pos, pos + lengths[idx]))
        pos += lengths[idx]
    return bursts


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic labeled dataset; class k is drawn from waveform family k."""
    rng = np.random.default_rng(spec.seed)
    classes = make_classes(spec.codes)
    families = spec.families or tuple(k % 4 for k in range(len(classes)))
    records = []
    bursts = {}
    i = 0
    for k, count in enumerate(spec.counts):
        for _ in range(int(count)):
            n = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
            x = _clean_waveform(rng, families[k], n)
            rec_id = f"s{i:05d}"
            layout = _burst_layout(rng, n, spec.noise_burst_fraction, spec.noise_burst_len)
            if layout:
                amp = 5.0 * float(np.max(np.abs(x)))
                for a, b in layout:
                    x[a:b] = rng.uniform(-amp, amp, b - a)
                bursts[rec_id] = tuple(layout)
            records.append(EcgRecord(rec_id, x, spec.sample_rate, classes[k]))
            i += 1
    return Dataset(records, classes, bursts)
