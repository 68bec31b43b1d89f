"""Experiment configuration: nested dataclasses parsed strictly from JSON.

Unknown keys and wrongly typed values raise ConfigError naming the dotted
field path, e.g. ``adaptation.retain_fraction``.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adapt import AdaptConfig
from .augment import default_candidates
from .errors import ConfigError
from .soman import ROUTINGS, Architecture, TrainConfig
from .synthdata import DEFAULT_GROUPS, DomainSpec


@dataclass
class DataConfig:
    spec: DomainSpec = field(default_factory=DomainSpec)
    n_source_train: int = 500
    n_source_val: int = 100
    n_target_train: int = 300
    n_target_test: int = 100
    target_gamma: float = 0.4
    target_shift_seed: int = 3
    online_gamma: float = 0.4
    online_shift_seed: int = 11


@dataclass
class SelectionConfig:
    candidates: list = field(default_factory=lambda: [a.name for a in default_candidates()])
    tau: float = 0.25
    max_k: int = 5


@dataclass
class StageTraining:
    iters: int = 1500
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9

    def train_config(self, seed):
        return TrainConfig(self.iters, self.batch_size, self.lr, self.momentum, self.weight_decay,
                           self.poly_power, seed)


@dataclass
class TrainingConfig:
    baseline: StageTraining = field(default_factory=StageTraining)
    vendor: StageTraining = field(default_factory=lambda: StageTraining(lr=0.0025))
    cpae: StageTraining = field(default_factory=lambda: StageTraining(iters=1000))
    ksweep_iters: int = 150
    widths: list = field(default_factory=lambda: list(Architecture().widths))
    strides: list = field(default_factory=lambda: list(Architecture().strides))
    cpae_width: int = 8

    def architecture(self):
        return Architecture(tuple(self.widths), tuple(self.strides))


@dataclass
class AdaptationConfig:
    rounds: int = 3
    retain_fraction: float = 0.33
    lambda_ent: float = 0.005
    use_cpae: bool = True
    infer_cpae: bool = False
    iters_per_round: int = 50
    batch_size: int = 4
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    class_weighting: str = "uniform"

    def adapt_config(self, seed):
        return AdaptConfig(self.rounds, self.retain_fraction, self.lambda_ent, self.use_cpae,
                           self.iters_per_round, self.batch_size, self.lr, self.momentum,
                           self.weight_decay, self.poly_power, seed, self.class_weighting)


@dataclass
class EvalConfig:
    scales: list = field(default_factory=lambda: [0.75, 1.0, 1.25])
    groups: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GROUPS.items()})


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    routings: list = field(default_factory=lambda: ["ERM", "LOpp"])
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    online: bool = True
    output_dir: str = "runs/default"

    def validate(self):
        for r in self.routings:
            if r not in ROUTINGS:
                raise ConfigError("routings", f"unknown routing {r!r}; expected a subset of {ROUTINGS}")
        if len(set(self.routings)) != len(self.routings):
            raise ConfigError("routings", "duplicate entries")
        names = {a.name for a in default_candidates()}
        for c in self.selection.candidates:
            if c not in names:
                raise ConfigError("selection.candidates", f"unknown augmentation group {c!r}")
        if not 0 < self.adaptation.retain_fraction <= 1:
            raise ConfigError("adaptation.retain_fraction", "must lie in (0, 1]")
        if self.adaptation.class_weighting not in ("source", "uniform"):
            raise ConfigError("adaptation.class_weighting", "expected 'source' or 'uniform'")
        if self.adaptation.rounds < 1:
            raise ConfigError("adaptation.rounds", "need at least one round")
        if self.selection.max_k < 1:
            raise ConfigError("selection.max_k", "must be >= 1")
        if not self.eval.scales or any(s <= 0 for s in self.eval.scales):
            raise ConfigError("eval.scales", "need at least one positive scale")
        c = self.data.spec.num_classes
        for g, members in self.eval.groups.items():
            if any(not 0 <= int(m) < c for m in members):
                raise ConfigError(f"eval.groups.{g}", f"class id outside [0, {c})")
        for name in ("n_source_train", "n_source_val", "n_target_train", "n_target_test"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"data.{name}", "must be >= 1")
        self.training.architecture()
        return self

    def to_dict(self):
        return _to_dict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON: {e}") from None
        return cls.from_dict(d)

    def hash(self, exclude=("output_dir",)):
        d = self.to_dict()
        for k in exclude:
            d.pop(k, None)
        return self.hash_of(d)

    @staticmethod
    def hash_of(d):
        from .checkpoint import config_hash
        return config_hash(d)


def _to_dict(obj):
    if isinstance(obj, DomainSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    return obj


def _check(value, typ, path):
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif typ is str:
        ok = isinstance(value, str)
    elif typ is list:
        ok = isinstance(value, list)
    elif typ is dict:
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(prefix or "config", "expected a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown field")
    kwargs = {}
    for name, value in d.items():
        path = prefix + name
        typ = hints[name]
        if typ is DomainSpec:
            try:
                kwargs[name] = DomainSpec.from_dict(value)
            except ConfigError as e:
                raise ConfigError(f"{path}.{e.field}", str(e).split(": ", 1)[-1]) from None
            except TypeError as e:
                raise ConfigError(path, str(e)) from None
        elif dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, value, path + ".")
        else:
            kwargs[name] = _check(value, typ, path)
    return cls(**kwargs)
