"""Run configuration: YAML file + command-line overrides + defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .baselines import POS_DROPOUT_RATE
from .data import FeatureSchema, GenConfig, config_hash
from .distill import DEFAULT_LAMBDA_GRID, DistillMode, TrainConfig
from .experiment import DEFAULT_SEEDS, MODEL_NAMES
from .model import TowerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    tower: TowerConfig = field(default_factory=TowerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    field_dim: int = 8
    pos_dim: int = 4
    model: str = "ours"
    dropout_rate: float = POS_DROPOUT_RATE
    data_seed: int = 0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    sweep_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"model must be one of {MODEL_NAMES}, got {self.model!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "sweep_grid", tuple(float(v) for v in self.sweep_grid))

    @property
    def schema(self) -> FeatureSchema:
        return self.gen.schema(self.field_dim, self.pos_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        for key in ("seeds", "sweep_grid"):
            d[key] = list(d[key])
        d["gen"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["gen"].items()}
        d["tower"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["tower"].items()}
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        try:
            kwargs = dict(data)
            if "gen" in kwargs:
                kwargs["gen"] = _build(GenConfig, kwargs["gen"], "gen")
            if "tower" in kwargs:
                kwargs["tower"] = _build(TowerConfig, kwargs["tower"], "tower")
            if "train" in kwargs:
                train = dict(kwargs["train"] or {})
                if "mode" in train:
                    train["mode"] = _build(DistillMode, train["mode"], "train.mode")
                kwargs["train"] = _build(TrainConfig, train, "train")
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _build(klass, values, section: str):
    if values is None:
        return klass()
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(klass)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    return klass(**values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return RunConfig.from_dict(data)


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_scalar(raw)
    return RunConfig.from_dict(data)


def with_train(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **changes))
