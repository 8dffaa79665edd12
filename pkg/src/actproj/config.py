"""Experiment configuration in a section-free ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .numerics import ValidationError, parse_manifest, read_manifest

DEFAULT_THRESHOLDS = (0.97, 0.98, 0.99, 0.995, 1.0)
ORDERS = ("reduce-then-train", "train-then-reduce")
POLICIES = ("threshold", "greedy", "both")
_POLICY_KEYS = ("output_dir", "policy", "thresholds", "budget_bits", "proxy", "measured_accuracy", "strict_recompute")


@dataclass
class ExperimentConfig:
    seed: int = 42
    dataset: str = "synthetic"
    cifar_dir: str = ""
    n_train_per_class: int = 500
    n_eval_per_class: int = 500
    calibration_size: int = 512
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.05
    min_pretrain_accuracy: float = 0.6
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 64
    policy: str = "both"
    thresholds: tuple = DEFAULT_THRESHOLDS
    budget_bits: int = 0
    order: str = "reduce-then-train"
    proxy: str = "sigma_sq"
    measured_accuracy: bool = False
    strict_recompute: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValidationError(f"dataset must be synthetic or cifar10, got {self.dataset!r}")
        if self.dataset == "cifar10" and not self.cifar_dir:
            raise ValidationError("cifar10 dataset needs cifar_dir")
        if self.policy not in POLICIES:
            raise ValidationError(f"policy must be one of {POLICIES}")
        if self.order not in ORDERS:
            raise ValidationError(f"order must be one of {ORDERS}")
        if self.proxy not in ("sigma_sq", "sigma"):
            raise ValidationError("proxy must be sigma_sq or sigma")
        if any(not 0 < t <= 1 for t in self.thresholds):
            raise ValidationError("thresholds must lie in (0, 1]")
        for name in ("n_train_per_class", "n_eval_per_class", "calibration_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.lr < 0 or self.budget_bits < 0:
            raise ValidationError("epochs, learning rate and budget must be non-negative")

    def to_text(self, skip=()):
        lines = []
        for f in dataclasses.fields(self):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(float(v)) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source="<config>"):
        return cls().updated(**parse_manifest(text, source))

    @classmethod
    def load(cls, path):
        return cls().updated(**read_manifest(path))

    def save(self, path):
        Path(path).write_text(self.to_text())

    def updated(self, **overrides):
        kwargs = dataclasses.asdict(self)
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for key, raw in overrides.items():
            if key not in types:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(getattr(self, key)))
        return ExperimentConfig(**kwargs)

    def digest(self):
        """Hash of the settings that shape the trained models.

        Reduction-policy settings are left out so that several policies can
        share one pretrained net and calibration; their plans are stored
        under distinct names.
        """
        return hashlib.sha256(self.to_text(skip=_POLICY_KEYS).encode()).hexdigest()[:12]

    def run_dir(self):
        return Path(self.output_dir) / f"run-{self.digest()}"


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        return tuple(float(v) for v in raw) if kind is tuple else kind(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {raw!r}") from exc
