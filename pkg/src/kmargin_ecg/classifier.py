"""Residual-convolution-recurrent segment classifier (numpy, double precision).

Architecture for one segment of length ``w``::

    standardize -> [conv -> norm -> act -> conv (+ skip) -> avg-pool] x num_blocks
                -> n_split mean-pooled fragments -> bidirectional LSTM
                -> concat(final h fwd, final h bwd) -> dense -> softmax

The skip path is the identity when a block keeps its channel count and a 1x1
projection otherwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol, Sequence

import numpy as np

from . import layers as L

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
CHECKPOINT_MAGIC = "RCRNET-CHECKPOINT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RcrConfig:
    window_size: int = 600
    num_blocks: int = 2
    channels: tuple[int, ...] | int = 8
    kernel_size: int = 7
    pool_stride: int = 2
    hidden_size: int = 16
    n_split: int = 30
    num_classes: int = 4
    standardize: bool = True
    normalization: bool = True
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        ch = self.channels
        if isinstance(ch, (int, np.integer)):
            ch = (int(ch),) * self.num_blocks
        object.__setattr__(self, "channels", tuple(int(c) for c in ch))
        for name in ("window_size", "num_blocks", "kernel_size", "pool_stride", "hidden_size", "n_split"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.channels) != self.num_blocks or min(self.channels) < 1:
            raise ConfigError("need one positive channel count per residual block")
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        pooled = self.pooled_length
        if pooled < 1:
            raise ConfigError(f"window {self.window_size} is too short for {self.num_blocks} pooling stages")
        if pooled % self.n_split:
            raise ConfigError(
                f"n_split={self.n_split} does not divide the pooled feature length {pooled}"
            )

    @property
    def pooled_length(self) -> int:
        n = self.window_size
        for _ in range(self.num_blocks):
            n //= self.pool_stride
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def param_layout(cfg: RcrConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    out = []
    cin = 1
    k = cfg.kernel_size
    for i, c in enumerate(cfg.channels):
        p = f"block{i}."
        out.append((p + "conv1.w", (c, cin, k)))
        # a bias before per-channel normalization is cancelled exactly
        if not cfg.normalization:
            out.append((p + "conv1.b", (c,)))
        else:
            out.append((p + "norm.gamma", (c,)))
            out.append((p + "norm.beta", (c,)))
        out.append((p + "conv2.w", (c, c, k)))
        out.append((p + "conv2.b", (c,)))
        if cin != c:
            out.append((p + "proj.w", (c, cin, 1)))
            out.append((p + "proj.b", (c,)))
        cin = c
    h = cfg.hidden_size
    for d in ("lstm_fwd", "lstm_bwd"):
        out.append((d + ".wx", (cin, 4 * h)))
        out.append((d + ".wh", (h, 4 * h)))
        out.append((d + ".b", (4 * h,)))
    out.append(("dense.w", (cfg.num_classes, 2 * h)))
    out.append(("dense.b", (cfg.num_classes,)))
    return out


def _init_param(rng: np.random.Generator, name: str, shape, hidden: int) -> np.ndarray:
    kind = name.rsplit(".", 1)[1]
    if name.endswith("norm.gamma"):
        return np.ones(shape)
    if kind in ("b", "beta"):
        b = np.zeros(shape)
        if name.startswith("lstm"):
            b[hidden:2 * hidden] = 1.0  # forget gate
        return b
    if name.startswith("lstm"):
        bound = 1.0 / math.sqrt(hidden)
        return rng.uniform(-bound, bound, shape)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.maximum(x.std(axis=-1, keepdims=True), STD_FLOOR)
    return (x - mu) / sd


class SegmentClassifier(Protocol):
    num_classes: int

    def predict_proba(self, segment: np.ndarray) -> np.ndarray: ...


@dataclass(eq=False)
class RcrModel:
    config: RcrConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def window_size(self) -> int:
        return self.config.window_size

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "RcrModel":
        return RcrModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward / backward -------------------------------------------------

    def _zeros(self, block: int) -> np.ndarray:
        return np.zeros(self.config.channels[block])

    def _act(self, x):
        if self.config.activation == "relu":
            return L.relu_forward(x)
        return x, None

    def _act_back(self, d, mask):
        return d if mask is None else L.relu_backward(d, mask)

    def logits(self, x: np.ndarray, keep_cache: bool = False):
        """x: (B, w) raw segments -> logits (B, m)."""
        cfg, p = self.config, self.params
        if cfg.standardize:
            x = standardize(x)
        h = x[:, None, :]
        caches = []
        for i in range(cfg.num_blocks):
            pre = f"block{i}."
            a, c1 = L.conv1d_forward(h, p[pre + "conv1.w"], p.get(pre + "conv1.b", self._zeros(i)))
            cn = None
            if cfg.normalization:
                a, cn = L.instance_norm_forward(a, p[pre + "norm.gamma"], p[pre + "norm.beta"])
            a, mask = self._act(a)
            a, c2 = L.conv1d_forward(a, p[pre + "conv2.w"], p[pre + "conv2.b"])
            cp = None
            if pre + "proj.w" in p:
                skip, cp = L.conv1d_forward(h, p[pre + "proj.w"], p[pre + "proj.b"])
            else:
                skip = h
            h, cpool = L.avg_pool_forward(a + skip, cfg.pool_stride)
            caches.append((c1, cn, mask, c2, cp, cpool))
        seq, cfrag = L.fragment_forward(h, cfg.n_split)
        hf, clf = L.lstm_forward(seq, p["lstm_fwd.wx"], p["lstm_fwd.wh"], p["lstm_fwd.b"])
        hb, clb = L.lstm_forward(seq[::-1], p["lstm_bwd.wx"], p["lstm_bwd.wh"], p["lstm_bwd.b"])
        feats = np.concatenate([hf, hb], axis=1)
        out, cd = L.dense_forward(feats, p["dense.w"], p["dense.b"])
        if keep_cache:
            return out, (caches, cfrag, clf, clb, cd)
        return out

    def backward(self, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
        cfg, p = self.config, self.params
        caches, cfrag, clf, clb, cd = cache
        grads = {}
        dfeats, grads["dense.w"], grads["dense.b"] = L.dense_backward(dlogits, cd)
        hsz = cfg.hidden_size
        dseq_f, grads["lstm_fwd.wx"], grads["lstm_fwd.wh"], grads["lstm_fwd.b"] = L.lstm_backward(
            dfeats[:, :hsz], clf
        )
        dseq_b, grads["lstm_bwd.wx"], grads["lstm_bwd.wh"], grads["lstm_bwd.b"] = L.lstm_backward(
            dfeats[:, hsz:], clb
        )
        dh = L.fragment_backward(dseq_f + dseq_b[::-1], cfrag)
        for i in reversed(range(cfg.num_blocks)):
            pre = f"block{i}."
            c1, cn, mask, c2, cp, cpool = caches[i]
            dy = L.avg_pool_backward(dh, cpool)
            da, grads[pre + "conv2.w"], grads[pre + "conv2.b"] = L.conv1d_backward(dy, c2)
            da = self._act_back(da, mask)
            if cn is not None:
                da, grads[pre + "norm.gamma"], grads[pre + "norm.beta"] = L.instance_norm_backward(da, cn)
            dh, grads[pre + "conv1.w"], db1 = L.conv1d_backward(da, c1)
            if pre + "conv1.b" in p:
                grads[pre + "conv1.b"] = db1
            if cp is not None:
                dskip, grads[pre + "proj.w"], grads[pre + "proj.b"] = L.conv1d_backward(dy, cp)
                dh = dh + dskip
            else:
                dh = dh + dy
        return grads

    def loss_and_grads(self, x, labels, weights=None):
        logits, cache = self.logits(x, keep_cache=True)
        loss, dlogits, _ = L.cross_entropy(logits, labels, weights)
        return loss, self.backward(dlogits, cache)

    # -- inference ----------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.window_size:
            raise ValueError(f"expected segments of length {self.window_size}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("segment contains non-finite values")
        return x

    def predict_proba(self, segment: np.ndarray) -> np.ndarray:
        return self.predict_proba_batch(segment)[0]

    def predict_proba_batch(self, segments, chunk: int = 256) -> np.ndarray:
        x = self._check_input(segments)
        out = [L.softmax(self.logits(x[i:i + chunk])) for i in range(0, x.shape[0], chunk)]
        return np.concatenate(out, axis=0) if out else np.empty((0, self.num_classes))


def build_model(cfg: RcrConfig) -> RcrModel:
    rng = np.random.default_rng(cfg.seed)
    params = {name: _init_param(rng, name, shape, cfg.hidden_size) for name, shape in param_layout(cfg)}
    return RcrModel(cfg, params)


def forward(model: RcrModel, segment: np.ndarray) -> np.ndarray:
    return model.predict_proba(segment)


class LookupClassifier:
    """Fixed segment -> distribution table, keyed by the segment's exact float64 bytes."""

    def __init__(self, table: Sequence[tuple[np.ndarray, Sequence[float]]], num_classes: int | None = None):
        self._table: dict[bytes, np.ndarray] = {}
        for seg, probs in table:
            probs = np.asarray(probs, dtype=np.float64)
            check_prob_vector(probs)
            if num_classes is None:
                num_classes = probs.size
            if probs.size != num_classes:
                raise ValueError("all table entries must have the same number of classes")
            self._table[self._key(seg)] = probs
        if num_classes is None:
            raise ValueError("num_classes is required for an empty table")
        self.num_classes = num_classes

    @staticmethod
    def _key(segment) -> bytes:
        return np.ascontiguousarray(segment, dtype=np.float64).tobytes()

    def predict_proba(self, segment: np.ndarray) -> np.ndarray:
        try:
            return self._table[self._key(segment)].copy()
        except KeyError:
            raise KeyError("segment not present in lookup table") from None


def check_prob_vector(p: np.ndarray, tol: float = 1e-9) -> None:
    if p.ndim != 1 or p.size < 1:
        raise ValueError("probability vector must be one-dimensional and nonempty")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"not a probability vector: {p}")


def predict_batch(clf: SegmentClassifier, segments) -> np.ndarray:
    """Class distributions for each segment, in input order; shape (n, m)."""
    if len(segments) == 0:
        return np.empty((0, clf.num_classes))
    batch = getattr(clf, "predict_proba_batch", None)
    if batch is not None:
        return batch(np.asarray(segments, dtype=np.float64))
    return np.stack([clf.predict_proba(s) for s in segments])


# ---------------------------------------------------------------------------
# Training


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(
    model: RcrModel,
    segments: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
    weights: np.ndarray | None = None,
    clip: float = 5.0,
) -> tuple[RcrModel, list[float]]:
    """Mini-batch gradient descent on the mean (weighted) cross-entropy.

    Updates ``model`` in place and returns it with the per-epoch mean loss.
    ``weights`` rescale each sample's loss term.
    """
    x = np.asarray(segments, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty (n, w) segment matrix")
    if y.shape != (x.shape[0],):
        raise ValueError("one label per segment required")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("label out of range")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    model._check_input(x[:1])
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            bw = None if w is None else w[idx]
            loss, grads = model.loss_and_grads(x[idx], y[idx], bw)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                    f"lr={lr} may be too large"
                )
            total += loss * idx.size
            if lr:
                clip_gradients(grads, clip)
                for name, g in grads.items():
                    model.params[name] -= lr * g
        trace.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return model, trace


# ---------------------------------------------------------------------------
# Gradient verification


def gradient_check_groups(
    model: RcrModel,
    segment: np.ndarray,
    label: int,
    eps: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per tensor.

    Every parameter tensor contributes at least a few coordinates; in total at
    least ``n_params`` coordinates are checked (all of them for smaller models).
    """
    x = np.asarray(segment, dtype=np.float64).reshape(1, -1)
    y = np.array([label])
    _, grads = model.loss_and_grads(x, y)
    total = model.num_parameters()
    rng = np.random.default_rng(seed)
    out = {}
    for name, param in model.params.items():
        flat = param.reshape(-1)
        take = min(flat.size, max(4, math.ceil(n_params * flat.size / total)))
        coords = rng.choice(flat.size, size=take, replace=False)
        worst = 0.0
        for j in coords:
            old = flat[j]
            flat[j] = old + eps
            lp = model.loss_and_grads(x, y)[0]
            flat[j] = old - eps
            lm = model.loss_and_grads(x, y)[0]
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[name].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
        out[name] = worst
    return out


def gradient_check(model: RcrModel, segment, label: int, eps: float = 1e-5, n_params: int = 200, seed: int = 0) -> float:
    return max(gradient_check_groups(model, segment, label, eps, n_params, seed).values())


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: RcrModel, path) -> None:
    cfg = model.config.to_dict()
    layout = param_layout(model.config)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for f in fields(RcrConfig):
        v = cfg[f.name]
        if isinstance(v, list):
            v = ",".join(str(c) for c in v)
        elif isinstance(v, bool):
            v = int(v)
        lines.append(f"{f.name}={v}")
    lines.append(f"num_params={sum(int(np.prod(s)) for _, s in layout)}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = np.concatenate([model.params[name].reshape(-1) for name, _ in layout]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_checkpoint(path) -> RcrModel:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"\nEND\n")
    if end < 0:
        raise ValueError(f"{path}: missing END marker in checkpoint header")
    head = data[:end].decode("ascii").split("\n")
    magic, _, version = head[0].partition(" ")
    if magic != CHECKPOINT_MAGIC or version != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    kv = dict(line.split("=", 1) for line in head[1:])
    kwargs = {}
    for f in fields(RcrConfig):
        raw = kv[f.name]
        if f.name == "channels":
            kwargs[f.name] = tuple(int(c) for c in raw.split(","))
        elif f.name in ("standardize", "normalization"):
            kwargs[f.name] = bool(int(raw))
        elif f.name == "activation":
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = int(raw)
    cfg = RcrConfig(**kwargs)
    body = np.frombuffer(data[end + len(b"\nEND\n"):], dtype="<f8")
    layout = param_layout(cfg)
    expected = sum(int(np.prod(s)) for _, s in layout)
    if body.size != expected or int(kv["num_params"]) != expected:
        raise ValueError(f"{path}: expected {expected} parameters, found {body.size}")
    params = {}
    pos = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        params[name] = body[pos:pos + size].astype(np.float64).reshape(shape)
        pos += size
    return RcrModel(cfg, params)

