"""Run configuration: a flat JSON object with dotted ``section.key`` names.

Example::

    {"data.seed": 3, "model.d_model": 96, "train.steps": 500}

Keys not listed in :data:`DEFAULTS` are rejected. Lists stand in for tuples.
``anomalies`` entries are objects with :class:`AnomalyEvent` fields.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Any, Iterable

from .codec import PatchCodec
from .dit import DitConfig
from .forecaster import RolloutConfig, TrainConfig
from .grid import GridSpec
from .synthetic import AnomalyEvent, AtmosphereParams


class ConfigError(ValueError):
    pass


# Desk-run model: small enough to train on one CPU core in about an hour.
DESK_MODEL = DitConfig(d_model=128, n_heads=4, n_blocks=4, lora_rank=2)

_DATA_EXCLUDE = ("grid", "anomalies")


def _data_defaults() -> dict[str, Any]:
    p = AtmosphereParams()
    d = {f.name: getattr(p, f.name) for f in dataclasses.fields(p) if f.name not in _DATA_EXCLUDE}
    d.update(n_lat=p.grid.n_lat, n_lon=p.grid.n_lon, n_train_years=3, anomalies=[])
    return d


def _section(name: str, values: dict[str, Any]) -> dict[str, Any]:
    return {f"{name}.{k}": (list(v) if isinstance(v, tuple) else v) for k, v in values.items()}


def build_defaults() -> dict[str, Any]:
    codec = PatchCodec(patch=8, latent_channels=20, hidden=128, steps=3000).get_params()
    out: dict[str, Any] = {}
    out.update(_section("data", _data_defaults()))
    out.update(_section("codec", codec))
    out.update(_section("model", dataclasses.asdict(DESK_MODEL)))
    out.update(_section("train", dataclasses.asdict(TrainConfig(steps=6000))))
    out.update(_section("rollout", dataclasses.asdict(RolloutConfig())))
    out.update(
        _section(
            "eval",
            {
                "n_init_dates": 16,
                "horizon_days": 30,
                "n_members": 20,
                "climatology_window_days": 7,
                "seed": 1000,
            },
        )
    )
    return out


DEFAULTS = build_defaults()


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if default is not None and value is not None and type(default) is not type(value):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {type(value).__name__}")
    return value


class RunConfig:
    """Resolved configuration with typed accessors per section."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    def atmosphere(self, **overrides) -> AtmosphereParams:
        d = self.section("data")
        d.update(overrides)
        grid = GridSpec.global_grid(d.pop("n_lat"), d.pop("n_lon"))
        d.pop("n_train_years")
        anomalies = tuple(AnomalyEvent(**a) for a in d.pop("anomalies"))
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        try:
            return AtmosphereParams(grid=grid, anomalies=anomalies, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid data section: {exc}") from exc

    def codec(self) -> PatchCodec:
        return PatchCodec(**self.section("codec"))

    def dit(self) -> DitConfig:
        return self._typed(DitConfig, "model")

    def train(self) -> TrainConfig:
        return self._typed(TrainConfig, "train")

    def rollout(self) -> RolloutConfig:
        return self._typed(RolloutConfig, "rollout")

    def eval(self) -> dict[str, Any]:
        return self.section("eval")

    def _typed(self, cls, name):
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in self.section(name).items()}
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = RunConfig(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        cfg.set(key.strip(), parse_value(raw))
    return cfg
