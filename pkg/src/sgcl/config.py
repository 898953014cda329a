"""Experiment configuration and its line-oriented ``key = value`` file form."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .objectives import LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-5
    decay_factor: float = 0.1
    decay_every: int = 3
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    eval_k: int = 20

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synonym_k: float = 0.75
    global_context: bool = True
    directed_graph: bool = False

    def with_values(self, values: dict[str, object]) -> "ExperimentConfig":
        """Copy with flat keys (as in config files) overridden."""
        groups = {name: dataclasses.asdict(getattr(self, name)) for name in _GROUPS}
        top = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in _GROUPS}
        for raw_key, raw in values.items():
            key = _ALIASES.get(raw_key, raw_key)
            owners = [g for g, d in groups.items() if key in d]
            if not owners and key not in top:
                raise ConfigError(f"unknown config key {raw_key!r}")
            for g in owners:
                groups[g][key] = _coerce(raw_key, raw, groups[g][key])
            if key in top:
                top[key] = _coerce(raw_key, raw, top[key])
        try:
            built = {g: _GROUPS[g](**groups[g]) for g in _GROUPS}
            return ExperimentConfig(**built, **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for g in _GROUPS:
            out.update(dataclasses.asdict(getattr(self, g)))
        for f in fields(self):
            if f.name not in _GROUPS:
                out[f.name] = getattr(self, f.name)
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.flat().items():
            if isinstance(value, (tuple, list)):
                value = ",".join(value)
            lines.append(f"{_FILE_NAMES.get(key, key)} = {value}")
        return "\n".join(lines) + "\n"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))


_GROUPS = {"encoder": EncoderConfig, "loss": LossConfig, "augment": AugmentConfig, "train": TrainConfig}
_ALIASES = {"lambda": "lam", "m": "n_methods", "M": "n_methods", "k": "synonym_k"}
_FILE_NAMES = {"lam": "lambda"}


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(part.strip() for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return text


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return (base or ExperimentConfig()).with_values(dict(parser["run"]))


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, base)
