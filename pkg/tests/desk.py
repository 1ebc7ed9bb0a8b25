"""Cached end-to-end desk run and the injected-event experiment used by the acceptance suite.

The full run (data, codec, forecaster, 16-date evaluation) takes about an
hour and a half on one core. Its products are stored under
``$LATENTCAST_ACCEPTANCE_DIR`` (default ``<repo>/.acceptance``) in a
directory keyed by the resolved config and package version, so later test
sessions reuse them. Delete the directory to force a fresh run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import latentcast
from latentcast.checkpoint import load_checkpoint, save_checkpoint
from latentcast.codec import PatchCodec
from latentcast.config import RunConfig
from latentcast.evaluation import EvaluationReport, climatological_base_rate, write_report
from latentcast.forecaster import LatentFlowForecaster, decode_ensemble, frames_per_day
from latentcast.grid import box_mean
from latentcast.metrics import event_probability
from latentcast.pipeline import make_datasets, run_pipeline

CACHE_ENV = "LATENTCAST_ACCEPTANCE_DIR"
REPO = Path(__file__).resolve().parents[1]

# Cold spell for the event experiment: peak frame at 06 UTC, when the local
# diurnal cycle over the box is near its zero crossing.
EVENT_DAY_OF_EVAL_YEAR = 200
EVENT = dict(channel=0, lat_deg=52.5, lon_deg=37.5, radius_deg=20.0, amplitude=-15.0, ramp_steps=8, plateau_steps=24)
EVENT_BOX = ((45.0, 60.0), (25.0, 50.0))
EVENT_QUANTILE = 0.25
EVENT_MEMBERS = 20
EVENT_LEADS_DAYS = (1, 20)


@dataclass
class DeskProducts:
    config: RunConfig
    forecaster: LatentFlowForecaster
    codec: PatchCodec
    report: EvaluationReport
    codec_error: float
    pca_error: float
    timings: dict


def cache_dir(cfg: RunConfig) -> Path:
    base = Path(os.environ.get(CACHE_ENV, REPO / ".acceptance"))
    key = hashlib.sha256((cfg.to_json() + latentcast.__version__).encode()).hexdigest()[:16]
    return base / f"desk-{key}"


def desk_run(cfg: RunConfig | None = None) -> DeskProducts:
    cfg = cfg or RunConfig()
    d = cache_dir(cfg)
    if not (d / "done").exists():
        logging.getLogger("latentcast").setLevel(logging.INFO)
        run = run_pipeline(cfg)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / "model.ckpt", run.forecaster, run.codec, {"config": cfg.values})
        with open(d / "report.pkl", "wb") as fh:
            pickle.dump(run.report, fh)
        write_report(run.report, d / "report")
        info = {"codec_error": run.codec_error, "pca_error": run.pca_error, "timings": run.timings}
        (d / "info.json").write_text(json.dumps(info, indent=2))
        (d / "config.json").write_text(cfg.to_json())
        (d / "done").write_text("ok\n")
    forecaster, codec, _ = load_checkpoint(d / "model.ckpt")
    with open(d / "report.pkl", "rb") as fh:
        report = pickle.load(fh)
    info = json.loads((d / "info.json").read_text())
    return DeskProducts(cfg, forecaster, codec, report, info["codec_error"], info["pca_error"], info["timings"])


def event_experiment(cfg: RunConfig, forecaster: LatentFlowForecaster, codec: PatchCodec, seed: int = 77) -> dict:
    """Event probability for an injected cold spell at 1-day and 20-day leads.

    The event is "box-mean t2m at the peak frame at or below the
    climatological lower quartile" (quartile over training frames at the same
    hour within a week of the same date).
    """
    train, clean_eval = make_datasets(cfg)
    fpd = frames_per_day(clean_eval.step_hours)
    target = EVENT_DAY_OF_EVAL_YEAR * fpd + 6 // clean_eval.step_hours
    n_train_frames = train.n_steps
    anomaly = dict(EVENT, step=n_train_frames + target)
    train_a, eval_a = make_datasets(_with_anomaly(cfg, anomaly))
    if train_a.values.tobytes() != train.values.tobytes():
        raise AssertionError("anomaly leaked into the training years")

    slot = int(eval_a.slots()[target])
    lat_box, lon_box = EVENT_BOX
    c = EVENT["channel"]
    near = _near_slot_means(train, slot, lat_box, lon_box, c)
    threshold = float(np.quantile(near, EVENT_QUANTILE))
    value_range = (-np.inf, threshold)
    base_rate = climatological_base_rate(train, slot, lat_box, lon_box, c, value_range)

    K = forecaster.training.context_frames
    out = {
        "threshold": threshold,
        "base_rate": base_rate,
        "truth_box_mean": box_mean(eval_a, target, c, lat_box, lon_box),
        "clean_box_mean": box_mean(clean_eval, target, c, lat_box, lon_box),
        "probability": {},
    }
    for days in EVENT_LEADS_DAYS:
        i0 = target - days * fpd
        z = codec.transform(eval_a.slice(i0 - K + 1, i0 + 1))
        ens = forecaster.predict(z, eval_a.time_at(i0), days, EVENT_MEMBERS, seed + days)
        ens = decode_ensemble(codec, ens, eval_a)
        lead = days * fpd - 1
        means = [box_mean(ens.fields[m], lead, c, lat_box, lon_box, grid=eval_a.grid) for m in range(ens.n_members)]
        out["probability"][days] = event_probability(ens, lat_box, lon_box, c, lead, value_range)
        out.setdefault("member_box_means", {})[days] = [float(x) for x in means]
    return out


def _with_anomaly(cfg: RunConfig, anomaly: dict) -> RunConfig:
    out = RunConfig(dict(cfg.values))
    out.set("data.anomalies", [anomaly])
    return out


def _near_slot_means(train, slot, lat_box, lon_box, channel, window_days=7):
    slots = train.slots()
    dd = np.abs(slots // 24 - slot // 24)
    dd = np.minimum(dd, 366 - dd)
    idx = np.flatnonzero((slots % 24 == slot % 24) & (dd <= window_days))
    return np.array([box_mean(train, int(t), channel, lat_box, lon_box) for t in idx])
