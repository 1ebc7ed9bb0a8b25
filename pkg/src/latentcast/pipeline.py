"""End-to-end steps shared by the CLI, the ablation harness and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .codec import PatchCodec, pca_patch_error
from .config import ConfigError, RunConfig
from .evaluation import EvaluationReport, evaluate, write_report
from .forecaster import LatentFlowForecaster
from .grid import FieldSequence
from .synthetic import ClimatologyTable, build_climatology, generate, split_years

logger = logging.getLogger(__name__)


def make_datasets(cfg: RunConfig) -> tuple[FieldSequence, FieldSequence]:
    """Generate the synthetic record and split it into (train, eval)."""
    params = cfg.atmosphere()
    n_train = cfg.values["data.n_train_years"]
    if not 0 < n_train < params.n_years:
        raise ConfigError("data.n_train_years must leave at least one evaluation year")
    return split_years(generate(params), n_train)


def fit_codec(cfg: RunConfig, train: FieldSequence) -> PatchCodec:
    return cfg.codec().fit(train)


def fit_forecaster(cfg: RunConfig, codec: PatchCodec, train: FieldSequence, on_checkpoint=None) -> LatentFlowForecaster:
    """Encode the training years and run variable-horizon training.

    ``on_checkpoint(forecaster, step)`` fires every ``train.checkpoint_every`` steps.
    """
    f = LatentFlowForecaster(model=cfg.dit(), training=cfg.train(), rollout=cfg.rollout())
    hook = None if on_checkpoint is None else (lambda step: on_checkpoint(f, step))
    return f.fit(codec.transform(train), on_checkpoint=hook)


def climatology_for(cfg: RunConfig, train: FieldSequence) -> ClimatologyTable:
    return build_climatology(train, cfg.eval()["climatology_window_days"])


def run_evaluation(
    cfg: RunConfig,
    forecaster: LatentFlowForecaster,
    codec: PatchCodec,
    data: FieldSequence,
    climatology: ClimatologyTable,
    **overrides,
) -> EvaluationReport:
    e = dict(cfg.eval(), **overrides)
    return evaluate(
        forecaster,
        codec,
        data,
        climatology,
        n_init_dates=e["n_init_dates"],
        horizon_days=e["horizon_days"],
        n_members=e["n_members"],
        seed=e["seed"],
        init_steps=e.get("init_steps"),
    )


@dataclass
class DeskRun:
    """Everything produced by one pass of the pipeline."""

    config: RunConfig
    train: FieldSequence
    data: FieldSequence
    codec: PatchCodec
    forecaster: LatentFlowForecaster
    climatology: ClimatologyTable
    report: EvaluationReport
    codec_error: float
    pca_error: float
    timings: dict[str, float] = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None) -> DeskRun:
    """Data, codec, forecaster, evaluation. Writes the report when ``out_dir`` is given."""
    timings = {}
    t = time.time()
    train, data = make_datasets(cfg)
    timings["data_s"] = time.time() - t

    c = cfg.codec()
    t = time.time()
    pca = pca_patch_error(train, data, c.patch, c.latent_channels)
    codec = c.fit(train)
    err = codec.reconstruction_error(data)
    timings["codec_s"] = time.time() - t
    logger.info("codec error %.4f (PCA oracle %.4f)", err, pca)

    t = time.time()
    forecaster = fit_forecaster(cfg, codec, train)
    timings["train_s"] = time.time() - t

    clim = climatology_for(cfg, train)
    t = time.time()
    report = run_evaluation(cfg, forecaster, codec, data, clim)
    timings["eval_s"] = time.time() - t
    report.extra.update(codec_error=err, pca_error=pca, timings=timings)
    if out_dir is not None:
        write_report(report, out_dir)
    return DeskRun(cfg, train, data, codec, forecaster, clim, report, err, pca, timings)


def derive(cfg: RunConfig, updates: dict) -> RunConfig:
    """Copy of ``cfg`` with some dotted keys replaced."""
    out = RunConfig(dict(cfg.values))
    for k, v in updates.items():
        out.set(k, v)
    return out


__all__ = [
    "DeskRun",
    "climatology_for",
    "derive",
    "fit_codec",
    "fit_forecaster",
    "make_datasets",
    "run_evaluation",
    "run_pipeline",
]
