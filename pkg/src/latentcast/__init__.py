"""Latent flow-matching transformer for autoregressive ensemble forecasting of gridded fields."""

from .codec import LatentSequence, PatchCodec
from .config import RunConfig, load_config
from .dit import CrossDiT, DitConfig, param_report
from .fieldio import read_fields, write_fields
from .forecaster import EnsembleForecast, LatentFlowForecaster, RolloutConfig, TrainConfig
from .grid import CalendarTime, FieldSequence, GridSpec, latitude_weights, timestamp_index
from .metrics import acc, crps_ensemble, event_probability, rmse
from .synthetic import AnomalyEvent, AtmosphereParams, ClimatologyForecaster, build_climatology, generate

__version__ = "0.1.0"

__all__ = [
    "AnomalyEvent",
    "AtmosphereParams",
    "CalendarTime",
    "ClimatologyForecaster",
    "CrossDiT",
    "DitConfig",
    "EnsembleForecast",
    "FieldSequence",
    "GridSpec",
    "LatentFlowForecaster",
    "LatentSequence",
    "PatchCodec",
    "RolloutConfig",
    "RunConfig",
    "TrainConfig",
    "acc",
    "build_climatology",
    "crps_ensemble",
    "event_probability",
    "generate",
    "latitude_weights",
    "load_config",
    "param_report",
    "read_fields",
    "rmse",
    "timestamp_index",
    "write_fields",
]
