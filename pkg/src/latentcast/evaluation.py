"""Multi-date ensemble evaluation against truth and the climatology baseline."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import PatchCodec
from .forecaster import LatentFlowForecaster, decode_ensemble, frames_per_day
from .grid import FieldSequence, box_mean, latitude_weights
from .metrics import LeadTimeSeries, acc_per_date, crps_fields, nanmean_or_nan, weighted_mse
from .synthetic import ClimatologyTable, climatology_forecast

logger = logging.getLogger(__name__)

METRICS = (
    "rmse",
    "acc",
    "crps",
    "crps_skill",
    "crps_spread",
    "climatology_rmse",
    "climatology_crps",
)
CONVENTIONS = {
    "rmse": "sqrt(mean over init dates of latitude-weighted MSE of the ensemble mean)",
    "acc": "uncentered latitude-weighted anomaly correlation of the ensemble mean; NaN when undefined",
    "crps": "fair estimator: skill - spread/2, spread over i != j member pairs",
    "climatology_crps": "climatology scored as a one-member ensemble (weighted MAE)",
}


class EvaluationError(ValueError):
    pass


@dataclass
class EvaluationReport:
    metrics: dict[str, LeadTimeSeries]
    init_steps: list[int]
    init_times: list[str]
    n_members: int
    horizon_days: int
    channels: tuple[str, ...]
    extra: dict = field(default_factory=dict)

    def ratio(self, metric: str, baseline: str) -> np.ndarray:
        return self.metrics[metric].values / self.metrics[baseline].values


def choose_init_steps(n_steps: int, context_frames: int, n_frames: int, n_dates: int) -> list[int]:
    """Evenly spaced init frames with room for the context and the full horizon."""
    lo, hi = context_frames - 1, n_steps - 1 - n_frames
    if hi < lo:
        raise EvaluationError(f"evaluation data ({n_steps} frames) too short for a {n_frames}-frame forecast")
    return sorted(set(np.linspace(lo, hi, n_dates).round().astype(int).tolist()))


def evaluate(
    forecaster: LatentFlowForecaster,
    codec: PatchCodec,
    data: FieldSequence,
    climatology: ClimatologyTable,
    n_init_dates: int = 16,
    horizon_days: int = 30,
    n_members: int = 20,
    seed: int = 0,
    init_steps: list[int] | None = None,
) -> EvaluationReport:
    """Ensemble forecasts from each init date, scored on the dynamic channels."""
    K = forecaster.training.context_frames
    n_frames = horizon_days * frames_per_day(data.step_hours)
    if init_steps is None:
        init_steps = choose_init_steps(data.n_steps, K, n_frames, n_init_dates)
    C = data.n_dynamic
    w = latitude_weights(data.grid)
    latents = codec.transform(data)

    acc_mse, acc_acc, acc_crps, acc_skill, acc_spread = [], [], [], [], []
    clim_mse, clim_crps = [], []
    for n, i0 in enumerate(init_steps):
        init_time = data.time_at(i0)
        ens = forecaster.predict(latents.slice(i0 - K + 1, i0 + 1), init_time, horizon_days, n_members, seed + i0)
        ens = decode_ensemble(codec, ens, data)
        fields = ens.fields[:, :, :C].astype(np.float64)
        truth = data.values[i0 + 1 : i0 + 1 + n_frames, :C].astype(np.float64)
        clim = climatology_forecast(climatology, init_time.advance(data.step_hours), n_frames, data.step_hours)
        clim_v = clim.values[:, :C].astype(np.float64)
        mean = fields.mean(axis=0)
        acc_mse.append(weighted_mse(mean, truth, w))
        acc_acc.append(acc_per_date(mean, truth, clim_v, w))
        c, s, p = crps_fields(fields, truth, w)
        acc_crps.append(c)
        acc_skill.append(s)
        acc_spread.append(p)
        clim_mse.append(weighted_mse(clim_v, truth, w))
        clim_crps.append(crps_fields(clim_v[None], truth, w)[0])
        logger.info("evaluated init %d/%d (frame %d, %s)", n + 1, len(init_steps), i0, init_time)

    lead_hours = data.step_hours * (np.arange(n_frames) + 1)
    channels = data.channel_names[:C]
    init_times = [str(data.time_at(i)) for i in init_steps]
    D = len(init_steps)

    def series(name, values):
        return LeadTimeSeries(name, values, lead_hours, channels, D, init_times)

    metrics = {
        "rmse": series("rmse", np.sqrt(np.mean(acc_mse, axis=0))),
        "acc": series("acc", nanmean_or_nan(np.stack(acc_acc), axis=0)),
        "crps": series("crps", np.mean(acc_crps, axis=0)),
        "crps_skill": series("crps_skill", np.mean(acc_skill, axis=0)),
        "crps_spread": series("crps_spread", np.mean(acc_spread, axis=0)),
        "climatology_rmse": series("climatology_rmse", np.sqrt(np.mean(clim_mse, axis=0))),
        "climatology_crps": series("climatology_crps", np.mean(clim_crps, axis=0)),
    }
    return EvaluationReport(metrics, list(init_steps), init_times, n_members, horizon_days, channels)


def write_report(report: EvaluationReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Long-format metric table, per-metric plot columns and a summary document."""
    out = Path(out_dir)
    (out / "columns").mkdir(parents=True, exist_ok=True)
    table = out / "metrics.tsv"
    with open(table, "w") as fh:
        fh.write(f"# members={report.n_members} horizon_days={report.horizon_days} init_dates={len(report.init_steps)}\n")
        for k, v in CONVENTIONS.items():
            fh.write(f"# {k}: {v}\n")
        fh.write("metric\tchannel\tlead_hours\tvalue\tn_init_dates\n")
        for name in METRICS:
            s = report.metrics[name]
            for li, lead in enumerate(s.lead_hours):
                for ci, ch in enumerate(s.channels):
                    v = s.values[li, ci]
                    fh.write(f"{name}\t{ch}\t{int(lead)}\t{'nan' if np.isnan(v) else repr(float(v))}\t{s.n_init_dates}\n")
    for name in METRICS:
        s = report.metrics[name]
        with open(out / "columns" / f"{name}.tsv", "w") as fh:
            fh.write("lead_hours\t" + "\t".join(s.channels) + "\n")
            for li, lead in enumerate(s.lead_hours):
                fh.write(f"{int(lead)}\t" + "\t".join(f"{x:.6g}" for x in s.values[li]) + "\n")
    summary = summary_tables(report)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return {"table": table, "summary": out / "summary.json", "columns": out / "columns"}


def summary_tables(report: EvaluationReport, days: tuple[int, ...] = (15, 30)) -> dict:
    """Per-channel RMSE and CRPS (model and climatology) at whole-day leads."""
    out: dict = {"init_dates": report.init_times, "n_members": report.n_members, "conventions": CONVENTIONS}
    for name in ("rmse", "crps", "climatology_rmse", "climatology_crps", "acc"):
        s = report.metrics[name]
        out[name] = {}
        for d in days:
            if d * 24 > s.lead_hours[-1]:
                continue
            row = s.at_lead(d * 24)
            out[name][f"{d}d"] = {ch: (None if np.isnan(v) else float(v)) for ch, v in zip(s.channels, row)}
    out.update(report.extra)
    return out


def read_metric_table(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    header = lines[0].rstrip("\n").split("\t")
    for ln in lines[1:]:
        rows.append(dict(zip(header, ln.rstrip("\n").split("\t"))))
    return rows


def climatological_base_rate(
    train: FieldSequence,
    target_slot: int,
    box_lat,
    box_lon,
    channel: int,
    value_range,
    window_days: int = 7,
) -> float:
    """Fraction of training frames near the target calendar slot whose box mean is in range.

    Frames qualify when their hour matches and their day of year is within
    ``window_days`` (circularly) of the target's.
    """
    slots = train.slots()
    doy, hour = slots // 24, slots % 24
    tdoy, thour = target_slot // 24, target_slot % 24
    dd = np.abs(doy - tdoy)
    dd = np.minimum(dd, 366 - dd)
    idx = np.flatnonzero((hour == thour) & (dd <= window_days))
    if not len(idx):
        raise EvaluationError("no training frames near the target slot")
    lo, hi = value_range
    means = np.array([box_mean(train, int(t), channel, box_lat, box_lon) for t in idx])
    return float(np.mean((means >= lo) & (means <= hi)))
