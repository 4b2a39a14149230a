"""Run configuration: one JSON document covering every module.

Unknown keys anywhere in the tree are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import SceneConfig
from .errors import ConfigError
from .evalkit import EvalConfig
from .geometry import DEFAULT_MU, BandConfig
from .inference import DEFAULT_MIN_AREA, DEFAULT_MU_INFER
from .model import ModelConfig
from .training import LossWeights, TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    mu: float = DEFAULT_MU
    mu_infer: float = DEFAULT_MU_INFER
    min_area: int = DEFAULT_MIN_AREA
    band: BandConfig = field(default_factory=BandConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    datagen: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if not 0.0 < self.mu <= 1.0:
            raise ConfigError(f"mu must lie in (0, 1], got {self.mu}")
        if not 0.0 <= self.mu_infer < 1.0:
            raise ConfigError(f"mu_infer must lie in [0, 1), got {self.mu_infer}")
        if self.min_area < 1:
            raise ConfigError("min_area must be >= 1")
        if self.datagen.max_len > self.model.L:
            raise ConfigError(f"datagen max_len {self.datagen.max_len} exceeds L={self.model.L}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v
    return conv(cfg)


def to_json(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True)


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)
