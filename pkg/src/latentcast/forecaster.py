"""Variable-horizon training, autoregressive rollout and ensemble generation."""

from __future__ import annotations

import logging
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import LatentSequence, PatchCodec
from .dit import CrossDiT, DitConfig
from .flow import FlowDivergenceError, SamplerConfig, euler_integrate, fm_loss, member_seed
from .grid import HOURS_PER_YEAR, CalendarTime, FieldSequence, GridSpec

logger = logging.getLogger(__name__)


class DatasetTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    context_frames: int = 4
    horizon_days_min: int = 1
    horizon_days_max: int = 8
    fixed_horizon_days: int | None = None
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    warmup_steps: int = 100
    min_lr_ratio: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    val_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 1 <= self.horizon_days_min <= self.horizon_days_max:
            raise ValueError("need 1 <= horizon_days_min <= horizon_days_max")
        if self.context_frames < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid training config")


@dataclass(frozen=True)
class RolloutConfig:
    chunk_frames: int = 16
    horizon_days: int = 30
    n_members: int = 20
    seed: int = 0
    sampler_steps: int = 20
    member_batch: int = 20

    def __post_init__(self):
        if self.chunk_frames < 1 or self.n_members < 1 or self.horizon_days < 1:
            raise ValueError("invalid rollout config")


@dataclass
class EnsembleForecast:
    """Members share the init time; lead i is ``(i + 1) * step_hours`` after it.

    ``latents`` is [M, T, c_z, h, w]; ``fields`` (after decoding) is
    [M, T, C, H, W].
    """

    latents: np.ndarray
    member_seeds: list[int]
    init_time: CalendarTime
    step_hours: int = 6
    fields: np.ndarray | None = None
    grid: GridSpec | None = None
    channel_names: tuple[str, ...] = ()
    channel_units: tuple[str, ...] = ()
    n_static: int = 0

    @property
    def n_members(self) -> int:
        return self.latents.shape[0]

    @property
    def n_steps(self) -> int:
        return self.latents.shape[1]

    @property
    def lead_hours(self) -> np.ndarray:
        return self.step_hours * (np.arange(self.n_steps) + 1)

    def member_sequence(self, m: int) -> FieldSequence:
        if self.fields is None:
            raise ValueError("ensemble not decoded")
        return FieldSequence(
            grid=self.grid,
            values=self.fields[m],
            start=self.init_time.advance(self.step_hours),
            step_hours=self.step_hours,
            n_static=self.n_static,
            channel_names=self.channel_names,
            channel_units=self.channel_units,
        )


def frames_per_day(step_hours: int) -> int:
    if 24 % step_hours:
        raise ValueError(f"step_hours {step_hours} does not divide a day")
    return 24 // step_hours


def draw_horizon_days(rng: np.random.Generator, config: TrainConfig) -> int:
    if config.fixed_horizon_days is not None:
        return config.fixed_horizon_days
    return int(rng.integers(config.horizon_days_min, config.horizon_days_max + 1))


def sample_training_window(
    dataset: LatentSequence,
    rng: np.random.Generator,
    context_frames: int = 4,
    horizon_days: int | None = None,
    config: TrainConfig | None = None,
    anchor: int | None = None,
):
    """Draw one (context, target, timestamps) window.

    The anchor is the last context frame, uniform over positions where the
    full window fits. Returns arrays [K, c, h, w], [n_target, c, h, w] and
    the calendar slot of each of the K + n_target frames.
    """
    config = config or TrainConfig(context_frames=context_frames)
    if horizon_days is None:
        horizon_days = draw_horizon_days(rng, config)
    n_target = horizon_days * frames_per_day(dataset.step_hours)
    lo, hi = context_frames - 1, dataset.n_steps - 1 - n_target
    if hi < lo:
        raise DatasetTooShortError(
            f"{dataset.n_steps} frames cannot hold {context_frames} context + {n_target} target frames"
        )
    if anchor is None:
        anchor = int(rng.integers(lo, hi + 1))
    elif not lo <= anchor <= hi:
        raise ValueError(f"anchor {anchor} outside [{lo}, {hi}]")
    window = dataset.values[anchor - context_frames + 1 : anchor + 1 + n_target]
    slots = dataset.slots()[anchor - context_frames + 1 : anchor + 1 + n_target]
    return window[:context_frames], window[context_frames:], slots


def sample_training_batch(dataset: LatentSequence, rng: np.random.Generator, config: TrainConfig):
    """Batch of windows sharing one horizon drawn for the whole batch."""
    horizon = draw_horizon_days(rng, config)
    ctx, tgt, ts = zip(
        *(
            sample_training_window(dataset, rng, config.context_frames, horizon, config)
            for _ in range(config.batch_size)
        )
    )
    return (
        torch.from_numpy(np.stack(ctx)),
        torch.from_numpy(np.stack(tgt)),
        torch.from_numpy(np.stack(ts)).long(),
    )


def make_optimizer(model: torch.nn.Module, config: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)

    def schedule(step: int) -> float:
        if step < config.warmup_steps:
            return (step + 1) / config.warmup_steps
        span = max(config.steps - config.warmup_steps, 1)
        progress = min((step - config.warmup_steps) / span, 1.0)
        return config.min_lr_ratio + (1 - config.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, schedule)


@torch.no_grad()
def validation_loss(model: CrossDiT, dataset: LatentSequence, config: TrainConfig, n_batches: int = 4) -> float:
    rng = np.random.default_rng(12345)
    gen = torch.Generator().manual_seed(12345)
    losses = [float(fm_loss(model, *sample_training_batch(dataset, rng, config), gen)) for _ in range(n_batches)]
    return float(np.mean(losses))


def train(
    model: CrossDiT,
    dataset: LatentSequence,
    config: TrainConfig,
    validation: LatentSequence | None = None,
    optimizer=None,
    on_checkpoint=None,
) -> list[dict]:
    """Optimize the flow-matching loss on variable-horizon windows.

    Returns the metrics log. ``on_checkpoint(step)`` is called every
    ``checkpoint_every`` steps; on divergence the exception propagates and the
    last checkpoint on disk stays intact.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0]))
    opt, sched = optimizer or make_optimizer(model, config)
    log: list[dict] = []
    running = []
    t0 = time.time()
    model.train()
    for step in range(config.steps):
        ctx, tgt, ts = sample_training_batch(dataset, rng, config)
        try:
            loss = fm_loss(model, ctx, tgt, ts, gen)
        except FlowDivergenceError:
            logger.error("divergence at step %d", step)
            raise
        opt.zero_grad()
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        sched.step()
        running.append(loss.item())
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            entry = {
                "step": step + 1,
                "loss": float(np.mean(running)),
                "lr": sched.get_last_lr()[0],
                "horizon_frames": int(tgt.shape[1]),
                "elapsed_s": time.time() - t0,
            }
            if validation is not None and config.val_every and (step + 1) % config.val_every == 0:
                entry["val_loss"] = validation_loss(model, validation, config)
            log.append(entry)
            logger.info("step %(step)d loss %(loss).4f lr %(lr).2e", entry)
            running = []
        if on_checkpoint is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            on_checkpoint(step + 1)
    model.eval()
    return log


@torch.no_grad()
def rollout_members(
    model: CrossDiT,
    init_context: np.ndarray,
    init_slot: int,
    n_frames: int,
    seeds: list[int],
    chunk_frames: int = 16,
    sampler: SamplerConfig = SamplerConfig(),
    step_hours: int = 6,
    trace: list | None = None,
) -> np.ndarray:
    """Autoregressive rollout of one member per seed, all sharing ``init_context``.

    ``init_context`` is [K, c, h, w] ending at calendar slot ``init_slot``.
    Each pass samples ``chunk_frames`` frames conditioned on the latest K
    frames; the output is truncated to ``n_frames``. Returns [M, n_frames, c, h, w].
    """
    K = init_context.shape[0]
    gens = [torch.Generator().manual_seed(s) for s in seeds]
    M = len(seeds)
    ctx = torch.from_numpy(np.ascontiguousarray(init_context)).unsqueeze(0).expand(M, *init_context.shape)
    ctx = ctx.to(next(model.parameters()).dtype)
    frames = []
    produced = 0
    while produced < n_frames:
        slots = (init_slot + step_hours * (produced + np.arange(-K + 1, chunk_frames + 1))) % HOURS_PER_YEAR
        ts = torch.from_numpy(slots).long().unsqueeze(0).expand(M, -1)
        noise = torch.stack(
            [torch.randn((chunk_frames,) + tuple(ctx.shape[2:]), generator=g, dtype=ctx.dtype) for g in gens]
        )
        if trace is not None:
            trace.append(ctx.clone().numpy())
        out = euler_integrate(model, ctx, noise, ts, sampler)
        frames.append(out)
        ctx = out[:, -K:]
        produced += chunk_frames
    return torch.cat(frames, dim=1)[:, :n_frames].numpy()


def rollout(
    model: CrossDiT,
    init_context: np.ndarray,
    init_time: CalendarTime,
    config: RolloutConfig,
    seed: int,
    step_hours: int = 6,
    trace: list | None = None,
) -> np.ndarray:
    """Single-member rollout of ``horizon_days`` days, shape [T, c, h, w]."""
    n_frames = config.horizon_days * frames_per_day(step_hours)
    return rollout_members(
        model,
        init_context,
        init_time.index,
        n_frames,
        [seed],
        config.chunk_frames,
        SamplerConfig(config.sampler_steps),
        step_hours,
        trace,
    )[0]


def ensemble_rollout(
    model: CrossDiT,
    init_context: np.ndarray,
    init_time: CalendarTime,
    config: RolloutConfig,
    step_hours: int = 6,
) -> tuple[np.ndarray, list[int]]:
    """All members, evaluated in batches of ``member_batch``; returns (latents, seeds)."""
    seeds = [member_seed(config.seed, m) for m in range(config.n_members)]
    n_frames = config.horizon_days * frames_per_day(step_hours)
    parts = [
        rollout_members(
            model,
            init_context,
            init_time.index,
            n_frames,
            seeds[i : i + config.member_batch],
            config.chunk_frames,
            SamplerConfig(config.sampler_steps),
            step_hours,
        )
        for i in range(0, len(seeds), config.member_batch)
    ]
    return np.concatenate(parts), seeds


class LatentFlowForecaster(BaseEstimator):
    """Flow-matching Cross-DiT forecaster over latent sequences.

    ``fit`` trains on a :class:`LatentSequence`; ``predict`` rolls out an
    ensemble from the last context frames of another one. Latents are
    standardized per channel internally.
    """

    def __init__(
        self,
        model: DitConfig = DitConfig(),
        training: TrainConfig = TrainConfig(),
        rollout: RolloutConfig = RolloutConfig(),
    ):
        self.model = model
        self.training = training
        self.rollout = rollout

    def _build(self, latent_shape: tuple[int, int, int]) -> None:
        c, h, w = latent_shape
        cfg = self.model.replace(latent_channels=c, latent_h=h, latent_w=w)
        if self.training.context_frames > cfg.max_context_frames:
            raise ValueError("context_frames exceeds the model's max_context_frames")
        fpd_max = self.training.fixed_horizon_days or self.training.horizon_days_max
        self.model_config_ = cfg
        torch.manual_seed(int(np.random.SeedSequence([self.training.seed, 0]).generate_state(1)[0]))
        self.network_ = CrossDiT(cfg)
        self.network_.eval()
        self._max_target_days = fpd_max

    def init_network(self, latent_shape: tuple[int, int, int], step_hours: int = 6):
        """Build the network without training (also used when loading checkpoints)."""
        self._build(latent_shape)
        self.step_hours_ = step_hours
        self.latent_mean_ = np.zeros(latent_shape[0])
        self.latent_scale_ = np.ones(latent_shape[0])
        self.log_ = []
        return self

    def fit(self, X: LatentSequence, y=None, validation: LatentSequence | None = None, on_checkpoint=None):
        values = X.values
        self._build(values.shape[1:])
        n_target = self._max_target_days * frames_per_day(X.step_hours)
        if n_target > self.model_config_.max_target_frames:
            raise ValueError(
                f"horizon of {n_target} frames exceeds max_target_frames={self.model_config_.max_target_frames}"
            )
        self.step_hours_ = X.step_hours
        self.latent_mean_ = values.mean(axis=(0, 2, 3), dtype=np.float64)
        std = values.std(axis=(0, 2, 3), dtype=np.float64)
        self.latent_scale_ = np.where(std > 0, std, 1.0)
        data = LatentSequence(self.standardize(values), X.start, X.step_hours, X.provenance)
        val = None
        if validation is not None:
            val = LatentSequence(self.standardize(validation.values), validation.start, validation.step_hours)
        self.optimizer_ = make_optimizer(self.network_, self.training)
        self.log_ = train(self.network_, data, self.training, val, self.optimizer_, on_checkpoint)
        return self

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return ((z - self.latent_mean_[:, None, None]) / self.latent_scale_[:, None, None]).astype(np.float32)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return (z * self.latent_scale_[:, None, None] + self.latent_mean_[:, None, None]).astype(np.float32)

    def predict(
        self,
        context: LatentSequence | np.ndarray,
        init_time: CalendarTime | None = None,
        horizon_days: int | None = None,
        n_members: int | None = None,
        seed: int | None = None,
    ) -> EnsembleForecast:
        """Ensemble forecast from the last ``context_frames`` frames of ``context``."""
        check_is_fitted(self, "network_")
        K = self.training.context_frames
        if isinstance(context, LatentSequence):
            if init_time is None:
                init_time = context.start.advance(context.step_hours * (context.n_steps - 1))
            values = context.values
        else:
            values = np.asarray(context)
            if init_time is None:
                raise ValueError("init_time required for raw context arrays")
        if values.shape[0] < K:
            raise ValueError(f"need {K} context frames, got {values.shape[0]}")
        cfg = self.rollout
        overrides = {
            k: v for k, v in (("horizon_days", horizon_days), ("n_members", n_members), ("seed", seed)) if v is not None
        }
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        if cfg.chunk_frames > self.model_config_.max_target_frames:
            raise ValueError(
                f"chunk_frames={cfg.chunk_frames} exceeds max_target_frames={self.model_config_.max_target_frames}"
            )
        z, seeds = ensemble_rollout(self.network_, self.standardize(values[-K:]), init_time, cfg, self.step_hours_)
        return EnsembleForecast(self.destandardize(z), seeds, init_time, self.step_hours_)


def decode_ensemble(codec: PatchCodec, forecast: EnsembleForecast, like: FieldSequence) -> EnsembleForecast:
    """Attach pixel-space fields decoded from every member's latents."""
    M, T = forecast.latents.shape[:2]
    flat = forecast.latents.reshape(M * T, *forecast.latents.shape[2:])
    fields = codec.inverse_transform(flat).reshape(M, T, *like.values.shape[1:])
    if like.n_static:
        fields[:, :, -like.n_static :] = like.values[0, -like.n_static :]
    forecast.fields = fields
    forecast.grid = like.grid
    forecast.channel_names = like.channel_names
    forecast.channel_units = like.channel_units
    forecast.n_static = like.n_static
    return forecast
