"""Desk-scale ablation sweeps over six design axes.

Every variant in a sweep shares the data seed and one codec trained on the
6-hour record, so differences come from the axis under study. Scores are
reported, never ranked.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import PatchCodec
from .config import ConfigError, RunConfig
from .forecaster import frames_per_day
from .pipeline import climatology_for, derive, fit_forecaster, make_datasets, run_evaluation
from .synthetic import AtmosphereParams

logger = logging.getLogger(__name__)

AXES = ("positional", "window", "skip", "horizon", "timestamp", "context")

# Small enough that all six sweeps finish in minutes on one core.
REDUCED = {
    "data.n_lat": 16,
    "data.n_lon": 32,
    "data.n_years": 2,
    "data.n_train_years": 1,
    "codec.hidden": 64,
    "codec.steps": 600,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.n_blocks": 2,
    "model.lora_rank": 4,
    "model.timestamp_embed_dim": 32,
    "model.time_freq_dim": 64,
    "model.max_context_frames": 8,
    "train.steps": 150,
    "train.batch_size": 8,
    "train.lr": 1e-3,
    "train.warmup_steps": 20,
    "train.horizon_days_max": 2,
    "train.log_every": 50,
    "rollout.sampler_steps": 8,
    "eval.n_init_dates": 3,
    "eval.horizon_days": 4,
    "eval.n_members": 4,
}
REPORT_LEADS_H = (24, 96)


def _skip(hours: int) -> dict:
    # keep the chaotic clock at the same speed per wall hour
    t_step = AtmosphereParams.lorenz_time_per_6h * hours / 6.0
    sub = max(1, int(np.ceil(t_step / AtmosphereParams.lorenz_dt - 1e-9)))
    return {"data.step_hours": hours, "data.lorenz_dt": t_step / sub}


def variants(axis: str) -> list[tuple[str, dict]]:
    """(label, config overrides) pairs for one axis."""
    if axis == "positional":
        return [(p, {"model.positional": p}) for p in ("rope1d+trainable2d", "rope3d")]
    if axis == "window":
        # fixed-length training windows with growing context
        return [(f"{k}x6h", {"train.context_frames": k, "train.fixed_horizon_days": 2}) for k in (1, 2, 4, 8)]
    if axis == "skip":
        return [(f"{h}h", _skip(h)) for h in (1, 6, 12)]
    if axis == "horizon":
        return [
            ("vht-chunk1d", {"rollout.chunk_days": 1}),
            ("vht-chunk2d", {"rollout.chunk_days": 2}),
            ("fixed2d-chunk2d", {"rollout.chunk_days": 2, "train.fixed_horizon_days": 2}),
        ]
    if axis == "timestamp":
        return [("with", {"model.use_timestamps": True}), ("without", {"model.use_timestamps": False})]
    if axis == "context":
        return [(f"{k * 6}h", {"train.context_frames": k}) for k in (2, 4, 8)]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _resolve(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply overrides, then size frame-count settings for the variant's step."""
    o = dict(overrides)
    chunk_days = o.pop("rollout.chunk_days", None)
    out = derive(cfg, o)
    fpd = frames_per_day(out.values["data.step_hours"])
    days = out.values["train.fixed_horizon_days"] or out.values["train.horizon_days_max"]
    out.set("model.max_target_frames", days * fpd)
    k = out.values["train.context_frames"]
    out.set("model.max_context_frames", max(k, out.values["model.max_context_frames"]))
    out.set("rollout.chunk_frames", (chunk_days or days) * fpd)
    return out


@dataclass
class AblationRow:
    axis: str
    variant: str
    rmse: dict[int, float]
    crps: dict[int, float]
    climatology_rmse: dict[int, float]
    train_s: float
    final_loss: float


def run_variant(cfg: RunConfig, codec: PatchCodec, axis: str, label: str, overrides: dict, data_cache: dict):
    vcfg = _resolve(cfg, overrides)
    key = vcfg.values["data.step_hours"]
    if key not in data_cache:
        train, test = make_datasets(vcfg)
        data_cache[key] = (train, test, climatology_for(vcfg, train))
    train, test, clim = data_cache[key]
    t = time.time()
    forecaster = fit_forecaster(vcfg, codec, train)
    train_s = time.time() - t
    report = run_evaluation(vcfg, forecaster, codec, test, clim)

    def at(name):
        s = report.metrics[name]
        # leads past the evaluated horizon are reported as NaN
        return {h: float(np.mean(s.at_lead(h))) if h in s.lead_hours else float("nan") for h in REPORT_LEADS_H}

    loss = forecaster.log_[-1]["loss"] if forecaster.log_ else float("nan")
    row = AblationRow(axis, label, at("rmse"), at("crps"), at("climatology_rmse"), train_s, loss)
    logger.info("ablation %s/%s rmse %s", axis, label, row.rmse)
    return row


def run_ablation(cfg: RunConfig, axis: str, codec: PatchCodec | None = None) -> list[AblationRow]:
    """Train and score every variant of ``axis`` on ``cfg`` (apply :data:`REDUCED` first for desk runs)."""
    pairs = variants(axis)
    data_cache: dict = {}
    if codec is None:
        base = derive(cfg, _skip(6))
        train, _ = make_datasets(base)
        codec = base.codec().fit(train)
    return [run_variant(cfg, codec, axis, label, o, data_cache) for label, o in pairs]


def reduced_config(cfg: RunConfig | None = None) -> RunConfig:
    return derive(cfg or RunConfig(), REDUCED)


def format_table(rows: list[AblationRow]) -> str:
    """Tab-separated comparison table: one row per variant, mean over channels."""
    cols = ["axis", "variant"]
    for h in REPORT_LEADS_H:
        cols += [f"rmse_{h}h", f"crps_{h}h", f"clim_rmse_{h}h"]
    cols += ["train_s", "final_loss"]
    lines = ["\t".join(cols)]
    for r in rows:
        vals = [r.axis, r.variant]
        for h in REPORT_LEADS_H:
            vals += [f"{r.rmse[h]:.5g}", f"{r.crps[h]:.5g}", f"{r.climatology_rmse[h]:.5g}"]
        vals += [f"{r.train_s:.1f}", f"{r.final_loss:.4g}"]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def write_ablation(rows: list[AblationRow], out_dir: str | Path, axis: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{axis}.tsv"
    path.write_text(format_table(rows))
    with open(out / f"ablation_{axis}.json", "w") as fh:
        json.dump([r.__dict__ for r in rows], fh, indent=2)
    return path
