"""Experiment configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import numpy as np
import yaml

from .attacks import AttackConfig, MinPerturbConfig
from .errors import ConfigError
from .labeling import REFERENCE_THRESHOLDS, ThresholdPair
from .nn_core import DenseNetSpec, TrainConfig


@dataclass
class DataConfig:
    """``source`` is ``two_scale`` or ``blobs`` (synthetic) or ``cifar10``."""

    source: str = "two_scale"
    n_classes: int = 10
    dim: int = 32
    n_per_class: int = 1200
    seed: int = 0
    validation_fraction: float = 0.2
    # blobs
    spread: float = 1.0
    mean_scale: float = 1.0
    # two_scale
    n_sparse: int | None = None
    sparse_width: int = 2
    sparse_gap: float = 0.4
    sparse_noise: float = 0.1
    dense_amplitude: float = 0.08
    dense_noise: float = 0.03
    # cifar10
    cifar_train_path: str | None = None
    cifar_test_path: str | None = None


@dataclass
class VictimConfig:
    model_id: str
    layer_widths: list[int]
    activations: list[str]
    encoder_depth: int
    seed: int

    def spec(self) -> DenseNetSpec:
        return DenseNetSpec(tuple(self.layer_widths), tuple(self.activations), self.seed)


@dataclass
class ThresholdConfig:
    """Either a fixed pair, or quantiles read off the validation distribution."""

    mode: str = "fixed"
    eps_attackable: float = 0.05
    eps_robust: float = 0.39
    attackable_quantile: float = 0.3
    robust_quantile: float = 0.7

    def fixed_pair(self) -> ThresholdPair:
        return ThresholdPair(self.eps_attackable, self.eps_robust)


@dataclass
class GridConfig:
    start: float = 0.0025
    stop: float = 0.5
    step: float = 0.0025
    refine: bool = True
    refine_tolerance: float = 0.0005

    def build(self) -> MinPerturbConfig:
        n = int(round((self.stop - self.start) / self.step)) + 1
        grid = tuple(np.round(self.start + self.step * np.arange(n), 10))
        return MinPerturbConfig(grid, self.refine, self.refine_tolerance)


@dataclass
class AttackSettings:
    iterations: int = 8
    step_ratio: float = 0.25
    init_seed: int = 0

    def build(self, method: str, epsilon: float = 0.03) -> AttackConfig:
        ratio = 1.0 if method == "fgsm" else self.step_ratio
        return AttackConfig(method, epsilon, epsilon * ratio, self.iterations, self.init_seed)


@dataclass
class EvaluationConfig:
    matched_method: str = "fgsm"
    unmatched_method: str = "pgd"
    correlation_methods: list[str] = field(default_factory=lambda: ["pgd", "bim"])
    alpha: float | None = None


@dataclass
class ActiveConfig:
    enabled: bool = True
    budgets: list[float] = field(default_factory=lambda: [0.2, 0.4, 1.0])
    rankings: list[str] = field(default_factory=lambda: ["random", "uncertainty", "deep"])
    epsilon: float = 0.03
    eval_epsilon: float = 0.03
    rank_seed: int = 0
    clean_mix: float = 0.0
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(32, 5, 0.01, (), 10.0, 0.9, 1e-4, 11)
    )


def _default_victims() -> list[VictimConfig]:
    return [
        VictimConfig("vgg", [32, 64, 64, 10], ["relu", "relu"], 2, 101),
        VictimConfig("resnext", [32, 128, 10], ["relu"], 1, 202),
        VictimConfig("densenet", [32, 48, 48, 48, 10], ["relu", "relu", "relu"], 3, 303),
    ]


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    seen: list[VictimConfig] = field(default_factory=_default_victims)
    target: VictimConfig = field(
        default_factory=lambda: VictimConfig("wrn", [32, 96, 96, 10], ["relu", "relu"], 2, 404)
    )
    victim_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(64, 20, 0.05, (10, 15), 10.0, 0.9, 1e-4, 7)
    )
    attack: AttackSettings = field(default_factory=AttackSettings)
    grid: GridConfig = field(default_factory=GridConfig)
    thresholds: dict[str, ThresholdConfig] = field(
        default_factory=lambda: {
            m: ThresholdConfig("quantile", p.eps_attackable, p.eps_robust) for m, p in REFERENCE_THRESHOLDS.items()
        }
    )
    detector_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(64, 200, 0.05, (100, 150), 10.0, 0.9, 1e-4, 13)
    )
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def seen_ids(self) -> list[str]:
        return [v.model_id for v in self.seen]

    @property
    def victims(self) -> list[VictimConfig]:
        return [*self.seen, self.target]

    def validate(self) -> None:
        ids = [v.model_id for v in self.victims]
        if self.target.model_id in self.seen_ids:
            raise ConfigError(f"target model {self.target.model_id!r} must not be in the seen set")
        if len(set(ids)) != len(ids):
            raise ConfigError("victim model ids must be unique")
        if not self.seen:
            raise ConfigError("at least one seen model is required")
        for v in self.victims:
            spec = v.spec()
            if not 0 <= v.encoder_depth < spec.n_layers:
                raise ConfigError(f"{v.model_id}: encoder_depth outside [0, {spec.n_layers})")
        ev = self.evaluation
        for m in {ev.matched_method, ev.unmatched_method, *ev.correlation_methods}:
            if m not in self.thresholds and m in (ev.matched_method, ev.unmatched_method):
                raise ConfigError(f"no thresholds configured for {m!r}")
            self.attack.build(m)
        for name, th in self.thresholds.items():
            if th.mode not in ("fixed", "quantile"):
                raise ConfigError(f"thresholds.{name}.mode must be 'fixed' or 'quantile'")
            if th.mode == "fixed":
                th.fixed_pair()
        if ev.alpha is not None and ev.alpha < 1:
            raise ConfigError("evaluation.alpha must be >= 1")
        self.grid.build()
        if self.data.source not in ("two_scale", "blobs", "cifar10"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        for r in self.active.rankings:
            if r not in ("random", "uncertainty", "deep"):
                raise ConfigError(f"unknown ranking {r!r}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(tp, value, where: str):
    origin = get_origin(tp)
    args = get_args(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        hints = get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if origin in (list, tuple):
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        return {k: _build(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if args and type(None) in args:
        inner = [a for a in args if a is not type(None)][0]
        return _build(inner, value, where)
    if tp is float:
        return float(value)
    if tp is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    return value


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    merged = _merge(ExperimentConfig().to_dict(), raw or {})
    return _build(ExperimentConfig, merged, "config")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML, list items addressed by index."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        *path, leaf = key.split(".")
        node = raw
        for p in path:
            node = _child(node, p, key, create=True)
        if isinstance(node, list):
            _child(node, leaf, key)
            node[int(leaf)] = yaml.safe_load(text)
        else:
            node[leaf] = yaml.safe_load(text)
    return raw


def _child(node, part: str, key: str, create: bool = False):
    """Step into a mapping key or a list index while resolving an override path."""
    if isinstance(node, dict):
        return node.setdefault(part, {}) if create else node[part]
    if isinstance(node, list):
        if not part.isdigit() or int(part) >= len(node):
            raise ConfigError(f"override {key!r}: bad list index {part!r}")
        return node[int(part)]
    raise ConfigError(f"override {key!r} descends into a scalar")


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    raw = _merge(ExperimentConfig().to_dict(), raw)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_dict(raw)


def content_hash(*parts) -> str:
    blob = json.dumps([_plain(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
