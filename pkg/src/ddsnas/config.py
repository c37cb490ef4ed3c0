"""Run configuration: nested dataclasses, YAML files and dotted-key overrides."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .fsutil import atomic_write_text

MODES = ("full", "fixed-subset", "untrained-autoencoder")


@dataclass
class DataConfig:
    path: str = ""                # binary dataset; empty means synthetic
    test_path: str = ""
    n_classes: int = 10
    side: int = 12
    n_train: int = 5000
    n_test: int = 1000
    noise: float = 0.25
    max_shift: int = 2
    dark_fraction: float = 0.25
    seed: int = 0


@dataclass
class CurriculumConfig:
    subset_size: int = 100
    tau_mastery: float = 0.5
    tau_hard: float = 0.85
    warmup_epochs: int = 10
    history_window: int = 3
    hardness_rule: str = "retain-high"


@dataclass
class AutoencoderSection:
    bottleneck: int = 32
    hidden: list = field(default_factory=lambda: [64, 32])
    loss: str = "contractive"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    contractive_lambda: float = 1e-4
    triplet_margin: float = 1.0


@dataclass
class IndexConfig:
    leaf_size: int = 8


@dataclass
class SupernetConfig:
    n_nodes: int = 4
    ops: list = field(default_factory=lambda: ["zero", "skip", "dense_relu", "dense_tanh", "conv3x3"])
    exclude_zero: bool = True
    batch_size: int = 5
    max_epochs: int = 200
    patience: int = 20
    alpha_init_scale: float = 1e-3


@dataclass
class OptimConfig:
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    weight_momentum: float = 0.9
    weight_decay: float = 3e-4
    schedule: str = "cyclic"          # or "cosine"
    base_lr: float = 0.001
    max_lr: float = 0.01
    step_size_up: int = 10
    step_size_down: int = 10


@dataclass
class FinetuneConfig:
    epochs: int = 1
    lr: float = 0.01
    batch_size: int = 64
    cells: int = 1
    inherit_weights: bool = True


@dataclass
class RunConfig:
    mode: str = "full"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    index: IndexConfig = field(default_factory=IndexConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self):
        c = self.curriculum
        for name in ("tau_mastery", "tau_hard"):
            v = getattr(c, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"curriculum.{name} must lie in (0, 1), got {v}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if c.subset_size <= 0 or c.subset_size % self.data.n_classes:
            raise ConfigError(
                f"curriculum.subset_size {c.subset_size} must be a positive multiple of data.n_classes")
        if c.warmup_epochs < 0:
            raise ConfigError("curriculum.warmup_epochs must be >= 0")
        if c.history_window < 1:
            raise ConfigError("curriculum.history_window must be >= 1")
        if c.hardness_rule not in ("retain-high", "retain-strict"):
            raise ConfigError("curriculum.hardness_rule must be 'retain-high' or 'retain-strict'")
        if self.autoencoder.loss not in ("contractive", "triplet_mse"):
            raise ConfigError("autoencoder.loss must be 'contractive' or 'triplet_mse'")
        if self.optim.schedule not in ("cyclic", "cosine"):
            raise ConfigError("optim.schedule must be 'cyclic' or 'cosine'")
        if self.optim.schedule == "cyclic" and not self.optim.base_lr < self.optim.max_lr:
            raise ConfigError("optim.base_lr must be below optim.max_lr")
        positive = [("autoencoder.bottleneck", self.autoencoder.bottleneck),
                    ("autoencoder.batch_size", self.autoencoder.batch_size),
                    ("supernet.batch_size", self.supernet.batch_size),
                    ("supernet.n_nodes", self.supernet.n_nodes),
                    ("finetune.batch_size", self.finetune.batch_size),
                    ("finetune.cells", self.finetune.cells),
                    ("index.leaf_size", self.index.leaf_size),
                    ("data.n_classes", self.data.n_classes)]
        for name, v in positive:
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        for name, v in [("autoencoder.epochs", self.autoencoder.epochs),
                        ("supernet.max_epochs", self.supernet.max_epochs),
                        ("finetune.epochs", self.finetune.epochs)]:
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if "zero" not in self.supernet.ops:
            raise ConfigError("supernet.ops must contain 'zero'")
        return self


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _coerce(value, typ, key):
    origin = typing.get_origin(typ) or typ
    if origin is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if origin is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if origin is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if origin is list:
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _field_types(cls):
    return typing.get_type_hints(cls)


def from_dict(d, cls=RunConfig, prefix=""):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    types = _field_types(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if k not in names:
            raise ConfigError(f"unknown config key {key!r}")
        t = types[k]
        if dataclasses.is_dataclass(t):
            kw[k] = from_dict(v, t, key + ".")
        else:
            kw[k] = _coerce(v, t, key)
    return cls(**kw)


def apply_override(cfg, dotted, value):
    """Set ``section.key`` on ``cfg`` from a string or typed value (type-checked)."""
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(obj, p)
    last = parts[-1]
    if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    t = _field_types(type(obj))[last]
    if dataclasses.is_dataclass(t):
        raise ConfigError(f"{dotted} is a section, not a value")
    if isinstance(value, str) and (typing.get_origin(t) or t) is not str:
        parsed = yaml.safe_load(value)
        value = parsed if parsed is not None else value
    setattr(obj, last, _coerce(value, t, dotted))
    return cfg


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def load_config(path=None, overrides=()):
    """Load YAML (or defaults when ``path`` is None), apply ``key=value`` overrides, validate."""
    if path:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from None
        cfg = from_dict(raw)
    else:
        cfg = RunConfig()
    for o in overrides:
        k, v = parse_override(o) if isinstance(o, str) else o
        apply_override(cfg, k, v)
    return cfg.validate()


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save_config(path, cfg):
    atomic_write_text(path, dump_config(cfg))


def schema_lines(cls=RunConfig, prefix=""):
    """``key (type) = default`` lines for every leaf setting."""
    out = []
    default = cls()
    types = _field_types(cls)
    for f in dataclasses.fields(cls):
        t = types[f.name]
        if dataclasses.is_dataclass(t):
            out.extend(schema_lines(t, prefix + f.name + "."))
        else:
            tn = getattr(typing.get_origin(t) or t, "__name__", str(t))
            out.append(f"{prefix}{f.name} ({tn}) = {getattr(default, f.name)!r}")
    return out
