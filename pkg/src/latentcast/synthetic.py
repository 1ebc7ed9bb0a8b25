"""Seeded toy atmosphere and the climatology built from it.

The generated field is a sum of calendar-locked harmonics (seasonal, diurnal,
year-periodic traveling waves), a chaotic Lorenz-96 component per latitude
band and white noise. Only the chaotic part and the noise are unpredictable
from the calendar, which gives forecasts skill over climatology that decays
with lead time.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .grid import HOURS_PER_YEAR, CalendarTime, FieldSequence, GridSpec

STEPS_PER_YEAR_6H = HOURS_PER_YEAR // 6


class ParameterError(ValueError):
    pass


class ClimatologyError(ValueError):
    pass


def lorenz96_tendency(x: np.ndarray, forcing: float) -> np.ndarray:
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F on rings along the last axis."""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def rk4_step(x: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    k1 = lorenz96_tendency(x, forcing)
    k2 = lorenz96_tendency(x + 0.5 * dt * k1, forcing)
    k3 = lorenz96_tendency(x + 0.5 * dt * k2, forcing)
    k4 = lorenz96_tendency(x + dt * k3, forcing)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_lorenz96(x0: np.ndarray, t_end: float, dt: float, forcing: float = 8.0) -> np.ndarray:
    """Fixed-step RK4 from 0 to ``t_end``; ``t_end/dt`` must be an integer."""
    n = int(round(t_end / dt))
    if not np.isclose(n * dt, t_end, rtol=0, atol=1e-12):
        raise ParameterError(f"t_end={t_end} is not a multiple of dt={dt}")
    x = np.array(x0, dtype=np.float64)
    for _ in range(n):
        x = rk4_step(x, dt, forcing)
    return x


@dataclass(frozen=True)
class AnomalyEvent:
    """A forced warm/cold spell added to one channel.

    ``step`` is the frame index at the center of the plateau. The amplitude
    ramps in and out with a raised cosine over ``ramp_steps`` frames.
    """

    step: int
    channel: int
    lat_deg: float
    lon_deg: float
    radius_deg: float
    amplitude: float
    ramp_steps: int = 8
    plateau_steps: int = 8


def _default_wave_speeds() -> tuple[float, ...]:
    # year-locked: wave k=2 repeats 4 times a year, k=3 repeats 6 times
    return (360.0 * 4 / (STEPS_PER_YEAR_6H * 2), 360.0 * 6 / (STEPS_PER_YEAR_6H * 3))


@dataclass(frozen=True)
class AtmosphereParams:
    seed: int = 0
    n_years: int = 4
    grid: GridSpec = field(default_factory=lambda: GridSpec.global_grid(24, 48))
    n_channels: int = 4
    step_hours: int = 6
    channel_names: tuple[str, ...] = ("t2m", "z500", "u500", "q700")
    channel_units: tuple[str, ...] = ("K", "dam", "m/s", "g/kg")
    channel_offset: tuple[float, ...] = (273.0, 550.0, 10.0, 5.0)
    seasonal_amp: tuple[float, ...] = (10.0, 8.0, 5.0, 2.0)
    diurnal_amp: tuple[float, ...] = (3.0, 0.5, 0.5, 0.3)
    wave_amp: tuple[float, ...] = (1.5, 4.0, 2.0, 0.4)
    chaos_amp: tuple[float, ...] = (3.0, 8.0, 4.0, 1.0)
    noise_amp: tuple[float, ...] = (0.1, 0.3, 0.15, 0.04)
    wave_numbers: tuple[int, ...] = (2, 3)
    wave_speeds: tuple[float, ...] = field(default_factory=_default_wave_speeds)
    lorenz_forcing: float = 8.0
    lorenz_sites: int = 12
    lorenz_bands: int = 4
    lorenz_time_per_6h: float = 0.025
    lorenz_dt: float = 0.00125
    lorenz_spinup: float = 20.0
    chaos_lon_shift_deg: tuple[float, ...] = (0.0, 15.0, 30.0, -15.0)
    static_amp: float = 1.0
    static_name: str = "orog"
    anomalies: tuple[AnomalyEvent, ...] = ()

    def __post_init__(self):
        per_channel = (
            "channel_names",
            "channel_units",
            "channel_offset",
            "seasonal_amp",
            "diurnal_amp",
            "wave_amp",
            "chaos_amp",
            "noise_amp",
            "chaos_lon_shift_deg",
        )
        for name in per_channel:
            if len(getattr(self, name)) != self.n_channels:
                raise ParameterError(f"{name} needs {self.n_channels} entries")
        for name in ("seasonal_amp", "diurnal_amp", "wave_amp", "chaos_amp", "noise_amp"):
            if min(getattr(self, name)) < 0:
                raise ParameterError(f"{name} must be non-negative")
        for c in range(self.n_channels):
            if self.seasonal_amp[c] == self.diurnal_amp[c] == self.wave_amp[c] == 0:
                raise ParameterError(f"channel {c} has no calendar signal")
        if len(self.wave_numbers) != len(self.wave_speeds):
            raise ParameterError("wave_numbers and wave_speeds differ in length")
        if self.n_years < 1 or self.step_hours < 1 or HOURS_PER_YEAR % self.step_hours:
            raise ParameterError("invalid n_years/step_hours")
        if self.lorenz_sites < 4 or self.lorenz_bands < 1:
            raise ParameterError("Lorenz-96 needs >= 4 sites and >= 1 band")
        substeps = self.lorenz_time_per_6h * self.step_hours / 6.0 / self.lorenz_dt
        if not np.isclose(substeps, round(substeps)) or round(substeps) < 1:
            raise ParameterError("lorenz_dt must divide the Lorenz time per step")
        for ev in self.anomalies:
            if not 0 <= ev.channel < self.n_channels:
                raise ParameterError(f"anomaly channel {ev.channel} out of range")

    @property
    def n_steps(self) -> int:
        return self.n_years * HOURS_PER_YEAR // self.step_hours


def lorenz96_trajectory(params: AtmosphereParams) -> np.ndarray:
    """Per-band Lorenz-96 states at every frame, shape [T, bands, sites].

    Each band is spun up from its own seed stream before frame 0.
    """
    substeps = int(round(params.lorenz_time_per_6h * params.step_hours / 6.0 / params.lorenz_dt))
    return _trajectory(
        params.seed,
        params.lorenz_bands,
        params.lorenz_sites,
        params.lorenz_forcing,
        params.lorenz_dt,
        params.lorenz_spinup,
        substeps,
        params.n_steps,
    ).copy()


@functools.lru_cache(maxsize=4)
def _trajectory(seed, bands, sites, forcing, dt, spinup, substeps, n_steps) -> np.ndarray:
    # cached: the integration is the slowest part of generation and is shared by param sweeps
    children = np.random.SeedSequence(seed).spawn(3)[0].spawn(bands)
    x = np.stack([forcing + 0.01 * np.random.default_rng(ss).standard_normal(sites) for ss in children])
    x = integrate_lorenz96(x, spinup, dt, forcing)
    out = np.empty((n_steps,) + x.shape)
    for t in range(n_steps):
        out[t] = x
        for _ in range(substeps):
            x = rk4_step(x, dt, forcing)
    return out


def _band_weights(grid: GridSpec, n_bands: int) -> np.ndarray:
    """Smooth partition of unity over latitude, shape [H, bands]."""
    centers = -90.0 + 180.0 * (np.arange(n_bands) + 0.5) / n_bands
    sigma = 0.6 * 180.0 / n_bands
    w = np.exp(-0.5 * ((grid.lats[:, None] - centers[None, :]) / sigma) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def _ring_to_lons(ring: np.ndarray, lons_deg: np.ndarray, shift_deg: float) -> np.ndarray:
    """Band-limited (Fourier) interpolation of ring values [..., J] to longitudes."""
    J = ring.shape[-1]
    coef = np.fft.rfft(ring, axis=-1) / J
    k = np.arange(coef.shape[-1])
    theta = np.deg2rad(lons_deg - shift_deg)
    basis = np.exp(1j * k[:, None] * theta[None, :])
    mult = np.where((k == 0) | ((J % 2 == 0) & (k == J // 2)), 1.0, 2.0)
    return np.real((coef * mult) @ basis)


def _anomaly_field(params: AtmosphereParams, ev: AnomalyEvent) -> tuple[np.ndarray, np.ndarray]:
    """Temporal profile [T] and spatial pattern [H, W] of one event."""
    grid = params.grid
    t = np.arange(params.n_steps)
    d = np.abs(t - ev.step) - ev.plateau_steps / 2.0
    profile = np.where(
        d <= 0, 1.0, np.where(d < ev.ramp_steps, 0.5 * (1 + np.cos(np.pi * d / max(ev.ramp_steps, 1))), 0.0)
    )
    lat = grid.lats[:, None]
    dlon = (grid.lons[None, :] - ev.lon_deg + 180.0) % 360.0 - 180.0
    dist2 = (lat - ev.lat_deg) ** 2 + (dlon * np.cos(np.deg2rad(ev.lat_deg))) ** 2
    return profile, np.exp(-0.5 * dist2 / ev.radius_deg**2)


def static_field(params: AtmosphereParams) -> np.ndarray:
    """Time-invariant orography analog, non-negative, shape [H, W]."""
    rng = np.random.default_rng(np.random.SeedSequence(params.seed).spawn(3)[2])
    lat = np.deg2rad(params.grid.lats)[:, None]
    lon = np.deg2rad(params.grid.lons)[None, :]
    f = np.zeros(params.grid.shape)
    for m in range(1, 5):
        for n in range(1, 4):
            a, b = rng.standard_normal(2) / (m * n)
            f += (a * np.cos(m * lon) + b * np.sin(m * lon)) * np.cos(n * lat) ** 2
    f = f - f.min()
    return params.static_amp * f / f.max()


def calendar_component(params: AtmosphereParams, slots: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Seasonal + diurnal + traveling-wave part, shape [T, C, H, W]."""
    grid = params.grid
    phi = np.deg2rad(grid.lats)[None, :, None]
    lon = grid.lons[None, None, :]
    doy = (slots // 24 + (slots % 24) / 24.0)[:, None, None]
    hour = (slots % 24)[:, None, None]
    year_phase = 2 * np.pi * (doy - 15.0) / 366.0
    rng = np.random.default_rng(np.random.SeedSequence(params.seed).spawn(3)[2].spawn(1)[0])
    phases = rng.uniform(0, 2 * np.pi, size=(params.n_channels, len(params.wave_numbers)))
    envelope = np.exp(-(((np.abs(np.rad2deg(phi)) - 45.0) / 20.0) ** 2))
    out = np.empty((len(slots), params.n_channels) + grid.shape)
    for c in range(params.n_channels):
        seasonal = params.seasonal_amp[c] * (0.5 * np.cos(2 * phi) - np.sin(phi) * np.cos(year_phase))
        local_time = hour + lon / 15.0
        diurnal = params.diurnal_amp[c] * np.cos(phi) * np.cos(2 * np.pi * (local_time - 15.0) / 24.0)
        waves = 0.0
        for w, (k, speed) in enumerate(zip(params.wave_numbers, params.wave_speeds)):
            # speed is degrees of longitude per 6 hours
            arg = np.deg2rad(k * (lon - speed * steps[:, None, None] * params.step_hours / 6.0))
            waves = waves + np.sin(arg + phases[c, w])
        out[:, c] = params.channel_offset[c] + seasonal + diurnal + params.wave_amp[c] * waves * envelope
    return out


def generate(params: AtmosphereParams, start: CalendarTime | None = None) -> FieldSequence:
    """Generate the full multi-year sequence (dynamic channels plus one static channel)."""
    start = start or CalendarTime(1, 1, 0)
    grid = params.grid
    T, C = params.n_steps, params.n_channels
    steps = np.arange(T)
    slots = (start.index + params.step_hours * steps) % HOURS_PER_YEAR
    values = np.empty((T, C + 1) + grid.shape, dtype=np.float32)
    values[:, :C] = calendar_component(params, slots, steps)

    if any(params.chaos_amp):
        traj = lorenz96_trajectory(params)
        traj = (traj - traj.mean()) / traj.std()
        bw = _band_weights(grid, params.lorenz_bands)
        for c in range(C):
            if params.chaos_amp[c] == 0:
                continue
            ring = _ring_to_lons(traj, grid.lons, params.chaos_lon_shift_deg[c])  # [T, bands, W]
            values[:, c] += params.chaos_amp[c] * np.einsum("yb,tbx->tyx", bw, ring)

    if any(params.noise_amp):
        rows = np.random.SeedSequence(params.seed).spawn(3)[1].spawn(grid.n_lat)
        for y, ss in enumerate(rows):
            noise = np.random.default_rng(ss).standard_normal((T, C, grid.n_lon))
            values[:, :C, y, :] += np.asarray(params.noise_amp)[None, :, None] * noise

    for ev in params.anomalies:
        profile, pattern = _anomaly_field(params, ev)
        values[:, ev.channel] += ev.amplitude * profile[:, None, None] * pattern

    values[:, C] = static_field(params)
    return FieldSequence(
        grid=grid,
        values=values,
        start=start,
        step_hours=params.step_hours,
        n_static=1,
        channel_names=tuple(params.channel_names) + (params.static_name,),
        channel_units=tuple(params.channel_units) + ("1",),
    )


def split_years(seq: FieldSequence, n_train_years: int) -> tuple[FieldSequence, FieldSequence]:
    """Split into the first ``n_train_years`` and the remainder."""
    cut = n_train_years * HOURS_PER_YEAR // seq.step_hours
    return seq.slice(0, cut), seq.slice(cut)


@dataclass(frozen=True)
class ClimatologyTable:
    """Mean field per (day of year, hour) slot, means shaped [366, n_hours, C, H, W]."""

    means: np.ndarray
    hours: tuple[int, ...]
    window_days: int
    grid: GridSpec
    n_static: int = 0
    channel_names: tuple[str, ...] = ()
    channel_units: tuple[str, ...] = ()

    def lookup(self, slots: Sequence[int] | np.ndarray) -> np.ndarray:
        slots = np.asarray(slots)
        doy, hour = slots // 24, slots % 24
        missing = sorted(set(hour.tolist()) - set(self.hours))
        if missing:
            raise ClimatologyError(f"no climatology for hours {missing}")
        hour_pos = np.searchsorted(np.asarray(self.hours), hour)
        return self.means[doy, hour_pos]


def build_climatology(train: FieldSequence, window_days: int = 7) -> ClimatologyTable:
    """Slot means over all training years, smoothed by a circular day-of-year window."""
    if train.n_steps * train.step_hours < HOURS_PER_YEAR:
        raise ClimatologyError("climatology needs at least one full year of data")
    if window_days < 0:
        raise ClimatologyError("window_days must be >= 0")
    slots = train.slots()
    hours = tuple(sorted(set((slots % 24).tolist())))
    hour_pos = np.searchsorted(np.asarray(hours), slots % 24)
    shape = (366, len(hours)) + train.values.shape[1:]
    sums = np.zeros(shape)
    counts = np.zeros((366, len(hours)))
    for t in range(train.n_steps):
        d, h = slots[t] // 24, hour_pos[t]
        sums[d, h] += train.values[t]
        counts[d, h] += 1
    wsum, wcount = sums.copy(), counts.copy()
    for s in range(1, min(window_days, 182) + 1):
        wsum += np.roll(sums, s, axis=0) + np.roll(sums, -s, axis=0)
        wcount += np.roll(counts, s, axis=0) + np.roll(counts, -s, axis=0)
    if np.any(wcount == 0):
        raise ClimatologyError("some calendar slots have no samples")
    means = wsum / wcount[:, :, None, None, None]
    return ClimatologyTable(
        means=means.astype(np.float32),
        hours=hours,
        window_days=window_days,
        grid=train.grid,
        n_static=train.n_static,
        channel_names=train.channel_names,
        channel_units=train.channel_units,
    )


def climatology_forecast(
    table: ClimatologyTable, start: CalendarTime, n_steps: int, step_hours: int = 6
) -> FieldSequence:
    """Climatological sequence for ``n_steps`` frames beginning at ``start``."""
    slots = (start.index + step_hours * np.arange(n_steps)) % HOURS_PER_YEAR
    return FieldSequence(
        grid=table.grid,
        values=table.lookup(slots),
        start=start,
        step_hours=step_hours,
        n_static=table.n_static,
        channel_names=table.channel_names,
        channel_units=table.channel_units,
    )


class ClimatologyForecaster(BaseEstimator):
    """Baseline that forecasts the calendar-slot mean of the training data."""

    def __init__(self, window_days: int = 7):
        self.window_days = window_days

    def fit(self, X: FieldSequence, y=None):
        self.table_ = build_climatology(X, self.window_days)
        self.step_hours_ = X.step_hours
        return self

    def predict(self, start: CalendarTime, n_steps: int) -> FieldSequence:
        check_is_fitted(self, "table_")
        return climatology_forecast(self.table_, start, n_steps, self.step_hours_)
