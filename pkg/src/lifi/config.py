"""Run configuration: dataclasses loaded from a TOML file.

Example ``run.toml``::

    seed = 0
    out_dir = "runs/sentiment"

    [data]
    preset = "sentiment"          # or give labeled / unlabeled / heldout JSONL paths
    # attributes = ["pos", "neg"] # required with explicit paths

    [model]
    n_layers = 4
    d_model = 64

    [adapters]
    r_ffn = 16

    [train]
    unlabeled_fraction = 1.0
    [train.base]
    lr = 2e-3
    epochs = 6

    [evaluation]
    alpha = 4.0

The environment variable ``LIFI_SEED`` overrides ``seed``.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .classifier import StageConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "LIFI_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    preset: str | None = "sentiment"
    synthetic: dict = field(default_factory=dict)
    labeled: str | None = None
    unlabeled: str | None = None
    heldout: str | None = None
    attributes: list[str] | None = None
    prompts: list[str] | None = None
    n_prompts: int = 40


@dataclass
class ModelSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_ctx: int = 128
    d_ff: int = 0


@dataclass
class ClassifierSection:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_ctx: int = 64


@dataclass
class AdapterSection:
    r_ffn: int = 16


@dataclass
class TrainConfig:
    base: StageConfig = field(default_factory=lambda: StageConfig(lr=2e-3, batch_size=32, epochs=6, schedule="cosine"))
    classifier: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-3, batch_size=32, epochs=10))
    adapters: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-3, batch_size=32, epochs=8))
    unlabeled_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.unlabeled_fraction <= 1.0:
            raise ConfigError(f"unlabeled_fraction must lie in [0, 1], got {self.unlabeled_fraction}")


@dataclass
class EvalConfig:
    enabled: bool = True
    alpha: float = 4.0
    alpha_grid: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0, 8.0])
    sweep: bool = False
    k: int = 50
    num: int = 5
    length: int = 30
    instrument_seed: int = 0
    cache_dir: str | None = None
    judge: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-3, batch_size=32, epochs=20, crop_len=30))
    scoring: StageConfig = field(default_factory=lambda: StageConfig(lr=2e-3, batch_size=32, epochs=6, schedule="cosine"))


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    adapters: AdapterSection = field(default_factory=AdapterSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: Any, where: str):
    if not is_dataclass(cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        ftype = known[name].type
        sub = _SECTIONS.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where or 'root'}] {e}") from None


_SECTIONS = {
    "DataConfig": DataConfig,
    "ModelSection": ModelSection,
    "ClassifierSection": ClassifierSection,
    "AdapterSection": AdapterSection,
    "TrainConfig": TrainConfig,
    "EvalConfig": EvalConfig,
    "StageConfig": StageConfig,
}


def config_from_dict(raw: dict, env: dict | None = None) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    d = cfg.data
    if d.preset is None and not d.labeled:
        raise ConfigError("[data] needs either a synthetic preset or a labeled corpus path")
    if d.preset is None and not d.attributes:
        raise ConfigError("[data] attributes are required when corpora are given as files")
    return cfg


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(raw, env)
