"""``key = value`` run configuration covering model/train/loss/augment/data sections."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .augment import AugmentConfig
from .errors import ConfigError, M2AEError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    subjects: int = 64
    pairs_per_subject: int = 4
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self):
        if self.subjects < 1 or self.pairs_per_subject < 1:
            raise ValueError("subjects and pairs_per_subject must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split needs three fractions summing to 1")


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "augment": AugmentConfig,
    "data": DataConfig,
}


# file key -> field key, for names that are Python keywords
ALIASES = {"loss.lambda": "loss.lam"}
_SPELLING = {v: k for k, v in ALIASES.items()}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_text(self):
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                text = ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
                key = f"{section}.{f.name}"
                lines.append(f"{_SPELLING.get(key, key)} = {text}")
        return "\n".join(lines) + "\n"


def _coerce(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(type(d)(x) for d, x in zip(default, raw.split(","), strict=True))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_pairs(lines, origin="<config>"):
    """Yield (key, value) from ``key = value`` lines; blank lines and ``#`` comments skipped."""
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        yield key.strip(), value.strip()


def apply(cfg: RunConfig, pairs):
    updates = {s: {} for s in SECTIONS}
    for key, value in pairs:
        section, _, name = ALIASES.get(key, key).partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[section][name] = _coerce(value, getattr(current, name), key)
    out = {}
    for section, upd in updates.items():
        try:
            out[section] = replace(getattr(cfg, section), **upd)
        except (ValueError, TypeError, M2AEError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from None
    return RunConfig(**out)


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply(cfg, parse_pairs(text.splitlines(), str(path)))
    return apply(cfg, parse_pairs(overrides, "--set"))

