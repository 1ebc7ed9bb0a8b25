"""Grid geometry, calendar slots and field containers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

HOURS_PER_YEAR = 8784
DAYS_IN_MONTH = (31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
_CUM_DAYS = np.concatenate([[0], np.cumsum(DAYS_IN_MONTH)]).astype(int)


class GridError(ValueError):
    pass


class CalendarError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon raster. Rows run south to north, columns eastward."""

    n_lat: int
    n_lon: int
    lat_start_deg: float
    lat_step_deg: float
    lon_step_deg: float

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 2:
            raise GridError(f"degenerate grid {self.n_lat}x{self.n_lon}")
        if self.lat_step_deg <= 0 or self.lon_step_deg <= 0:
            raise GridError("grid steps must be positive")
        lats = self.lats
        if lats[0] < -90 - 1e-9 or lats[-1] > 90 + 1e-9:
            raise GridError("latitude centers outside [-90, 90]")

    @classmethod
    def global_grid(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Equal-angle global grid with cell centers offset half a step from the poles."""
        step = 180.0 / n_lat
        return cls(n_lat, n_lon, -90.0 + step / 2, step, 360.0 / n_lon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start_deg + self.lat_step_deg * np.arange(self.n_lat)

    @property
    def lons(self) -> np.ndarray:
        return np.mod(self.lon_step_deg * np.arange(self.n_lon), 360.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)


def latitude_weights(grid: GridSpec, normalize: bool = True) -> np.ndarray:
    """Cell-area latitude weights.

    Each row gets ``sin(upper edge) - sin(lower edge)`` with edges clipped to
    the poles. With ``normalize`` the weights are rescaled to mean one.
    """
    if grid.n_lat < 2:
        raise GridError("latitude weights need at least two rows")
    half = np.deg2rad(grid.lat_step_deg) / 2
    phi = np.deg2rad(grid.lats)
    upper = np.clip(phi + half, -np.pi / 2, np.pi / 2)
    lower = np.clip(phi - half, -np.pi / 2, np.pi / 2)
    w = np.sin(upper) - np.sin(lower)
    if np.any(w <= 0):
        raise GridError("grid rows with zero area")
    if normalize:
        w = w / w.mean()
    return w


@dataclass(frozen=True, order=True)
class CalendarTime:
    """A slot on the fixed 366-day calendar plus an absolute step index.

    ``step`` counts steps of the owning sequence from its start and is only
    used for ordering; the calendar triple determines the slot.
    """

    month: int
    day: int
    hour: int
    step: int = 0

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise CalendarError(f"month {self.month} out of range")
        if not 1 <= self.day <= DAYS_IN_MONTH[self.month - 1]:
            raise CalendarError(f"day {self.day} invalid for month {self.month}")
        if not 0 <= self.hour <= 23:
            raise CalendarError(f"hour {self.hour} out of range")

    @property
    def index(self) -> int:
        return timestamp_index(self)

    @property
    def day_of_year(self) -> int:
        """Zero-based day of the 366-day year."""
        return int(_CUM_DAYS[self.month - 1]) + self.day - 1

    @classmethod
    def from_index(cls, index: int, step: int = 0) -> "CalendarTime":
        if not 0 <= index < HOURS_PER_YEAR:
            raise CalendarError(f"slot index {index} out of range")
        doy, hour = divmod(int(index), 24)
        month = int(np.searchsorted(_CUM_DAYS, doy, side="right"))
        day = doy - int(_CUM_DAYS[month - 1]) + 1
        return cls(month, day, hour, step)

    def advance(self, hours: int, steps: int = 1) -> "CalendarTime":
        """Move forward by ``hours`` on the wrapping 366-day calendar."""
        return CalendarTime.from_index((self.index + hours) % HOURS_PER_YEAR, self.step + steps)

    def __str__(self) -> str:
        return f"{self.month:02d}-{self.day:02d}T{self.hour:02d}"

    @classmethod
    def parse(cls, text: str) -> "CalendarTime":
        """Parse ``MM-DDTHH`` (``MM-DD`` implies hour 0)."""
        try:
            date, _, hour = text.partition("T")
            month, day = date.split("-")
            return cls(int(month), int(day), int(hour or 0))
        except ValueError as exc:
            raise CalendarError(f"cannot parse calendar time {text!r}") from exc


def timestamp_index(t: CalendarTime) -> int:
    """Slot index in [0, 8783]: ``(days before month + day - 1) * 24 + hour``."""
    return (int(_CUM_DAYS[t.month - 1]) + t.day - 1) * 24 + t.hour


def slot_indices(start: CalendarTime, n_steps: int, step_hours: int) -> np.ndarray:
    """Calendar slot of each of ``n_steps`` frames starting at ``start``."""
    return (start.index + step_hours * np.arange(n_steps)) % HOURS_PER_YEAR


@dataclass(frozen=True)
class FieldSequence:
    """Time-ordered multi-channel fields on a grid, values shaped [T, C, H, W].

    The last ``n_static`` channels hold time-invariant fields.
    """

    grid: GridSpec
    values: np.ndarray
    start: CalendarTime
    step_hours: int = 6
    n_static: int = 0
    channel_names: tuple[str, ...] = ()
    channel_units: tuple[str, ...] = ()

    def __post_init__(self):
        v = self.values
        if v.ndim != 4:
            raise GridError(f"values must be [T, C, H, W], got shape {v.shape}")
        if v.shape[0] < 1:
            raise GridError("sequence needs at least one frame")
        if v.shape[2:] != self.grid.shape:
            raise GridError(f"values grid {v.shape[2:]} != grid {self.grid.shape}")
        if not 0 <= self.n_static <= v.shape[1]:
            raise GridError("n_static exceeds channel count")
        if not np.isfinite(v).all():
            raise GridError("values contain NaN or Inf")
        if self.step_hours < 1 or HOURS_PER_YEAR % self.step_hours:
            raise GridError(f"step_hours {self.step_hours} must divide {HOURS_PER_YEAR}")
        names = self.channel_names or tuple(f"ch{i}" for i in range(v.shape[1]))
        units = self.channel_units or tuple("1" for _ in range(v.shape[1]))
        if len(names) != v.shape[1] or len(units) != v.shape[1]:
            raise GridError("channel names/units do not match channel count")
        object.__setattr__(self, "channel_names", tuple(names))
        object.__setattr__(self, "channel_units", tuple(units))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_dynamic(self) -> int:
        return self.n_channels - self.n_static

    def slots(self) -> np.ndarray:
        return slot_indices(self.start, self.n_steps, self.step_hours)

    def time_at(self, i: int) -> CalendarTime:
        return self.start.advance(self.step_hours * i, steps=i)

    def slice(self, t0: int, t1: int | None = None) -> "FieldSequence":
        t1 = self.n_steps if t1 is None else t1
        if not 0 <= t0 < t1 <= self.n_steps:
            raise GridError(f"bad time slice [{t0}, {t1})")
        return dataclasses.replace(self, values=self.values[t0:t1], start=self.time_at(t0))

    def with_values(self, values: np.ndarray, start: CalendarTime | None = None) -> "FieldSequence":
        return dataclasses.replace(self, values=values, start=self.start if start is None else start)


def box_mask(grid: GridSpec, lat_range: Sequence[float], lon_range: Sequence[float]) -> np.ndarray:
    """Boolean [H, W] mask of cells whose centers fall in the box.

    Membership is half-open, ``lo <= x < hi``; longitudes wrap, so
    ``lon_range=(350, 10)`` crosses the meridian. A box reaching 90N
    includes the pole row.
    """
    lat_lo, lat_hi = lat_range
    lats = grid.lats
    lat_in = (lats >= lat_lo) & ((lats < lat_hi) | ((lat_hi >= 90) & (lats <= 90)))
    lon_lo, lon_hi = lon_range
    width = lon_hi - lon_lo
    if width >= 360:
        lon_in = np.ones(grid.n_lon, dtype=bool)
    else:
        width = np.mod(width, 360.0)
        lon_in = np.mod(grid.lons - lon_lo, 360.0) < width
    return lat_in[:, None] & lon_in[None, :]


def box_mean(
    seq: FieldSequence | np.ndarray,
    t: int,
    c: int,
    lat_range: Sequence[float],
    lon_range: Sequence[float],
    grid: GridSpec | None = None,
) -> float:
    """Latitude-weighted mean of one channel at one time over a lat-lon box.

    ``seq`` may also be a raw [T, C, H, W] array when ``grid`` is given.
    """
    if isinstance(seq, FieldSequence):
        grid, values = seq.grid, seq.values
    else:
        if grid is None:
            raise GridError("grid required for raw arrays")
        values = np.asarray(seq)
    mask = box_mask(grid, lat_range, lon_range)
    if not mask.any():
        raise GridError(f"box lat={tuple(lat_range)} lon={tuple(lon_range)} contains no cell centers")
    w = np.broadcast_to(latitude_weights(grid)[:, None], grid.shape)
    cells = values[t, c].astype(np.float64)[mask]
    # shifting by one cell value keeps constant boxes exact
    ref = cells[0]
    return float(ref + ((cells - ref) * w[mask]).sum() / w[mask].sum())


__all__ = [
    "HOURS_PER_YEAR",
    "CalendarError",
    "CalendarTime",
    "FieldSequence",
    "GridError",
    "GridSpec",
    "box_mask",
    "box_mean",
    "latitude_weights",
    "slot_indices",
    "timestamp_index",
]
