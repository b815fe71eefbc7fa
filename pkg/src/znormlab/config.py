"""Experiment configuration: flat key-value config files, strictly validated.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Every key must be in the documented table below; unknown keys are errors,
not warnings, so a typo can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from . import optim, transforms


class ConfigError(ValueError):
    pass


ARCHS = ("resmlp-s", "resnet-8")
DATASETS = ("spirals", "ring-gaussians", "mnist", "cifar10")
TRANSFORMS = tuple(transforms.KIND_ALIASES)  # config-file spellings
PRECISIONS = ("f32", "f64")
AUGMENTS = ("off", "flip-crop")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    arch: str
    epochs: int
    seed: int = 1
    data_dir: str = ""
    n: int = 2000
    noise: float = 0.05
    train_limit: int = 0
    batch_size: int = 64
    augment: str = "off"
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epochs: tuple[int, ...] = ()
    transform: str = "identity"
    epsilon: float = 1e-8
    clip_threshold: float = 1.0
    probe_cadence: int = 10  # 0 disables the overlap probe
    precision: str = "f32"
    out_dir: str = ""

    def validate(self) -> None:
        checks = [
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}, got {self.dataset!r}"),
            (self.arch in ARCHS, f"arch must be one of {ARCHS}, got {self.arch!r}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.n > 0, f"n must be positive, got {self.n}"),
            (self.noise >= 0, f"noise must be >= 0, got {self.noise}"),
            (self.train_limit >= 0, f"train_limit must be >= 0, got {self.train_limit}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.augment in AUGMENTS, f"augment must be one of {AUGMENTS}, got {self.augment!r}"),
            (self.optimizer in optim.KINDS,
             f"optimizer must be one of {optim.KINDS}, got {self.optimizer!r}"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (0 <= self.momentum < 1, f"momentum must be in [0,1), got {self.momentum}"),
            (self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}"),
            (all(e >= 0 for e in self.lr_decay_epochs),
             f"lr_decay_epochs must be non-negative, got {self.lr_decay_epochs}"),
            (self.transform in TRANSFORMS,
             f"transform must be one of {tuple(TRANSFORMS)}, got {self.transform!r}"),
            (self.epsilon > 0, f"epsilon must be positive, got {self.epsilon}"),
            (self.clip_threshold > 0,
             f"clip_threshold must be positive, got {self.clip_threshold}"),
            (self.probe_cadence >= 0, f"probe_cadence must be >= 0, got {self.probe_cadence}"),
            (self.precision in PRECISIONS,
             f"precision must be one of {PRECISIONS}, got {self.precision!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.dataset in ("mnist", "cifar10") and not self.data_dir:
            raise ConfigError(f"dataset {self.dataset!r} requires data_dir")

    def transform_spec(self) -> transforms.GradTransformSpec:
        return transforms.GradTransformSpec(
            kind=transforms.KIND_ALIASES[self.transform],
            epsilon=self.epsilon,
            clip_threshold=self.clip_threshold,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = ",".join(str(e) for e in self.lr_decay_epochs)
        return d

    def hash(self) -> str:
        """Stable digest of everything that affects results (out_dir excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        canon = "\n".join(f"{k}={d[k]}" for k in sorted(d))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    if key == "lr_decay_epochs":
        raw = raw.strip()
        if not raw:
            return ()
        try:
            return tuple(int(tok.strip()) for tok in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}")
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {ftype}, got {raw!r}")
    return raw


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    if overrides:
        values.update(overrides)
    missing = [k for k in ("dataset", "arch", "epochs") if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {missing}")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as f:
        return parse_config_text(f.read(), overrides)
