"""Run configuration: defaults, ``key = value`` config files and validation."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .classifier import ConfigError, RcrConfig

FULL_WINDOW = 6000
FULL_N_SPLIT = 300

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    window_size: int = FULL_WINDOW
    max_stride: int = 500
    k: int = 3
    # None: FULL_N_SPLIT scaled by window_size / FULL_WINDOW, then fitted to the pooled length
    n_split: int | None = None
    num_blocks: int = 2
    channels: int = 8
    kernel_size: int = 7
    pool_stride: int = 2
    hidden_size: int = 16
    standardize: bool = True
    lr: float = 0.01
    batch_size: int = 32
    clip: float = 5.0
    warmup_epochs: int = 5
    select_epochs: int = 3
    split: float = 0.8
    # 0: use max_stride when cutting evaluation records
    infer_stride: int = 0
    seed: int = 0
    codes: tuple[str, ...] = field(default=("N", "A", "O", "P"))

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Full-scale geometry scaled down 10x (window 600, MS 50, n_split 30)."""
        base = dict(window_size=600, max_stride=50, n_split=30, lr=0.05, warmup_epochs=12, select_epochs=4)
        base.update(overrides)
        return cls(**base)

    def with_updates(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @property
    def eval_stride(self) -> int:
        return self.infer_stride or self.max_stride

    def pooled_length(self) -> int:
        n = self.window_size
        for _ in range(self.num_blocks):
            n //= self.pool_stride
        return n

    def resolved_n_split(self) -> int:
        pooled = self.pooled_length()
        if pooled < 1:
            raise ConfigError(f"window_size {self.window_size} too short for {self.num_blocks} pooling stages")
        if self.n_split is not None:
            if pooled % self.n_split:
                raise ConfigError(f"n_split={self.n_split} does not divide the pooled length {pooled}")
            return self.n_split
        target = max(1, round(FULL_N_SPLIT * self.window_size / FULL_WINDOW))
        return max(d for d in range(1, min(target, pooled) + 1) if pooled % d == 0)

    def model_config(self, num_classes: int | None = None) -> RcrConfig:
        return RcrConfig(
            window_size=self.window_size,
            num_blocks=self.num_blocks,
            channels=self.channels,
            kernel_size=self.kernel_size,
            pool_stride=self.pool_stride,
            hidden_size=self.hidden_size,
            n_split=self.resolved_n_split(),
            num_classes=num_classes or len(self.codes),
            standardize=self.standardize,
            seed=self.seed,
        )

    def validate(self) -> "RunConfig":
        for name in ("window_size", "max_stride", "k", "num_blocks", "channels", "kernel_size",
                     "pool_stride", "hidden_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("warmup_epochs", "select_epochs", "infer_stride"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_split is not None and self.n_split < 1:
            raise ConfigError("n_split must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie strictly between 0 and 1")
        if self.lr < 0 or self.clip < 0:
            raise ConfigError("lr and clip must be >= 0")
        if len(set(self.codes)) != len(self.codes) or len(self.codes) < 2:
            raise ConfigError("need at least two unique class codes")
        self.model_config()
        return self


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if name == "codes":
        return tuple(c.strip() for c in raw.split(",") if c.strip())
    if name == "n_split":
        return None if raw.lower() in ("", "auto", "none") else int(raw)
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
CONFIG_KEYS = tuple(FIELD_TYPES)


def parse_value(name: str, raw: str):
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        return _coerce(name, FIELD_TYPES[name], raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def read_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines from ``path`` on top of ``base``.

    Blank lines and ``#`` comments are ignored.  The special key
    ``preset = toy`` switches the base to :meth:`RunConfig.toy`.
    """
    base = base or RunConfig()
    updates = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, value = (s.strip() for s in text.split("=", 1))
        if key == "preset":
            if value != "toy":
                raise ConfigError(f"{path}:{lineno}: unknown preset {value!r}")
            base = RunConfig.toy()
            continue
        try:
            updates[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return base.with_updates(**updates)


def write_config_file(cfg: RunConfig, path) -> None:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "codes":
            v = ",".join(v)
        elif v is None:
            v = "auto"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
