"""Verification scores: latitude-weighted RMSE, ACC, fair CRPS and event probabilities.

Spatial means use normalized latitude weights; per-date scores are reduced
over init dates in a fixed order. RMSE averages the per-date weighted MSE
over dates before the square root.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import FieldSequence, GridSpec, box_mean


def weighted_spatial_mean(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Latitude-weighted mean over the trailing [H, W] axes (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return np.einsum("...hw,h->...", x, w) / (w.sum() * x.shape[-1])


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FieldSequence) else np.asarray(x)


def _check_aligned(forecast, truth) -> None:
    if isinstance(forecast, FieldSequence) and isinstance(truth, FieldSequence):
        if forecast.start.index != truth.start.index:
            raise ValueError(f"forecast starts {forecast.start}, truth starts {truth.start}")
        if forecast.step_hours != truth.step_hours:
            raise ValueError("forecast and truth step_hours differ")
    if _values(forecast).shape != _values(truth).shape:
        raise ValueError(f"shape mismatch {_values(forecast).shape} vs {_values(truth).shape}")


def weighted_mse(forecast, truth, weights) -> np.ndarray:
    _check_aligned(forecast, truth)
    err = _values(forecast).astype(np.float64) - _values(truth).astype(np.float64)
    return weighted_spatial_mean(err**2, weights)


def rmse(forecast, truth, weights) -> np.ndarray:
    """Per-(lead, channel) RMSE.

    Inputs are [L, C, H, W] (one init date) or [D, L, C, H, W]; with several
    dates the weighted MSE is averaged over dates before the square root.
    """
    mse = weighted_mse(forecast, truth, weights)
    if mse.ndim == 3:
        mse = mse.mean(axis=0)
    return np.sqrt(mse)


def acc_per_date(forecast, truth, climatology, weights) -> np.ndarray:
    """Uncentered anomaly correlation per leading index; NaN where undefined."""
    _check_aligned(forecast, truth)
    clim = _values(climatology).astype(np.float64)
    fa = _values(forecast).astype(np.float64) - clim
    ta = _values(truth).astype(np.float64) - clim
    num = weighted_spatial_mean(fa * ta, weights)
    den = np.sqrt(weighted_spatial_mean(fa**2, weights) * weighted_spatial_mean(ta**2, weights))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return out


def acc(forecast, truth, climatology, weights) -> np.ndarray:
    """Per-(lead, channel) ACC, averaged over dates for [D, L, C, H, W] inputs.

    Dates with zero anomaly variance are skipped; if none remain the value is NaN.
    """
    a = acc_per_date(forecast, truth, climatology, weights)
    if a.ndim == 3:
        return nanmean_or_nan(a, axis=0)
    return a


def nanmean_or_nan(a: np.ndarray, axis: int) -> np.ndarray:
    n = np.sum(~np.isnan(a), axis=axis)
    s = np.nansum(a, axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, s / np.maximum(n, 1), np.nan)


def crps_ensemble(members: np.ndarray, obs: np.ndarray, axis: int = 0):
    """Fair CRPS with its skill and spread terms, elementwise.

    skill = mean |x_i - y|, spread = mean over i != j of |x_i - x_j| (0 for a
    single member), crps = skill - spread / 2.
    """
    x = np.moveaxis(np.asarray(members, dtype=np.float64), axis, 0)
    y = np.asarray(obs, dtype=np.float64)
    M = x.shape[0]
    if M == 0:
        raise ValueError("CRPS needs at least one member")
    skill = np.mean(np.abs(x - y), axis=0)
    if M == 1:
        spread = np.zeros_like(skill)
    else:
        xs = np.sort(x, axis=0)
        rank = (2 * np.arange(M) - M + 1).reshape((M,) + (1,) * (x.ndim - 1))
        # ranks sum to zero, so offsetting by the minimum changes nothing in exact
        # arithmetic; it keeps identical members at exactly zero spread
        spread = 2 * np.sum(rank * (xs - xs[:1]), axis=0) / (M * (M - 1))
    return skill - spread / 2, skill, spread


def crps_fields(members: np.ndarray, truth: np.ndarray, weights: np.ndarray, member_axis: int = 0):
    """Latitude-weighted spatial means of (crps, skill, spread)."""
    c, s, p = crps_ensemble(members, truth, axis=member_axis)
    return (
        weighted_spatial_mean(c, weights),
        weighted_spatial_mean(s, weights),
        weighted_spatial_mean(p, weights),
    )


def event_probability(
    ensemble,
    box_lat: Sequence[float],
    box_lon: Sequence[float],
    channel: int,
    target_index: int,
    value_range: Sequence[float],
    grid: GridSpec | None = None,
) -> float:
    """Fraction of members whose box mean at ``target_index`` lies in the closed range.

    ``ensemble`` is a decoded :class:`EnsembleForecast` or an array
    [M, T, C, H, W] together with ``grid``.
    """
    if hasattr(ensemble, "fields"):
        if ensemble.fields is None:
            raise ValueError("ensemble must be decoded to pixel space")
        fields, grid = ensemble.fields, ensemble.grid
    else:
        fields = np.asarray(ensemble)
    if not 0 <= target_index < fields.shape[1]:
        raise ValueError(f"target index {target_index} outside forecast horizon {fields.shape[1]}")
    lo, hi = value_range
    means = np.array([box_mean(f, target_index, channel, box_lat, box_lon, grid=grid) for f in fields])
    return float(np.mean((means >= lo) & (means <= hi)))


@dataclass
class LeadTimeSeries:
    """Metric values shaped [lead, channel]."""

    name: str
    values: np.ndarray
    lead_hours: np.ndarray
    channels: tuple[str, ...]
    n_init_dates: int
    init_dates: list[str] = field(default_factory=list)

    def at_lead(self, hours: int) -> np.ndarray:
        idx = np.flatnonzero(self.lead_hours == hours)
        if not len(idx):
            raise KeyError(f"no lead {hours} h")
        return self.values[idx[0]]
