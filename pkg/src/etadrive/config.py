"""Run configuration: a JSON file of sections plus ``section.key=value`` overrides.

Unknown sections or keys are errors. Every artifact records
:func:`config_hash` of the resolved configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .harness.train import TrainConfig
from .models import EncoderConfig, ModelConfig
from .scheduler import CostModel, PipelineConfig
from .toyworld.scenarios import SCENARIO_KINDS


@dataclass(frozen=True)
class WorldConfig:
    """Episodes used for data collection and evaluation."""

    scenarios: tuple[str, ...] = SCENARIO_KINDS
    eval_seeds: tuple[int, ...] = tuple(range(10))
    train_seeds: tuple[int, ...] = tuple(range(10, 30))
    collect_ticks: int = 100
    delta_ms: float = 500.0

    def __post_init__(self):
        bad = [s for s in self.scenarios if s not in SCENARIO_KINDS]
        if bad:
            raise ConfigError(f"unknown scenarios {bad}; expected a subset of {SCENARIO_KINDS}")
        if self.collect_ticks < 1:
            raise ConfigError("collect_ticks must be >= 1")


@dataclass(frozen=True)
class ModelSection:
    depth: int = 6
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    forecast_depth: int = 2
    decoder_depth: int = 2

    def build(self) -> ModelConfig:
        enc = EncoderConfig(depth=self.depth, dim=self.dim, heads=self.heads, mlp_ratio=self.mlp_ratio)
        return ModelConfig(enc, self.forecast_depth, self.decoder_depth)


@dataclass(frozen=True)
class ScheduleSection:
    tick_ms: float = 50.0
    delta_ms: float = 500.0
    batch_size: int | None = None
    capacity: int = 16

    def build(self) -> PipelineConfig:
        return PipelineConfig(self.tick_ms, self.delta_ms, self.batch_size, self.capacity)


# toy-scale optimisation defaults; see the README for why the LR differs from 3e-5
TOY_TRAIN = TrainConfig(epochs=80, steps_per_epoch=25, lr=3e-3)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    model: ModelSection = ModelSection()
    costs: CostModel = CostModel()
    schedule: ScheduleSection = ScheduleSection()
    train: TrainConfig = TOY_TRAIN

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTION_TYPES = {"world": WorldConfig, "model": ModelSection, "costs": CostModel,
                  "schedule": ScheduleSection, "train": TrainConfig}


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key}: expected a list, got {value!r}")
        inner = type(default[0]) if default else str
        try:
            return tuple(inner(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        return value
    if default is None:
        return None if value is None else int(value)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int) and float(value).is_integer():
            return int(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{section}.{key}: value {value!r} does not match type of default {default!r}")


def _apply(cfg: RunConfig, section: str, updates: dict) -> RunConfig:
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(_SECTION_TYPES)}")
    current = getattr(cfg, section)
    known = {f.name for f in fields(current)}
    clean = {}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        clean[key] = _coerce(section, key, getattr(current, key), value)
    try:
        return replace(cfg, **{section: replace(current, **clean)})
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    for section, body in data.items():
        if not isinstance(body, dict):
            if section in _SECTION_TYPES:
                raise ConfigError(f"config section {section!r} must be an object")
            raise ConfigError(f"unknown config section {section!r}")
        cfg = _apply(cfg, section, body)
    return cfg


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = path.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        cfg = from_dict(data, cfg)
    # grouped per section so cross-field checks see every override at once
    grouped: dict[str, dict] = {}
    for text in overrides:
        section, key, value = parse_override(text)
        grouped.setdefault(section, {})[key] = value
    for section, updates in grouped.items():
        cfg = _apply(cfg, section, updates)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
