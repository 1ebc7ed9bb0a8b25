"""Flow-matching objective and Euler sampler on the straight noise-to-data path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class FlowDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 20

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("sampler needs at least one step")

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_steps + 1)


def interpolate(noise: torch.Tensor, data: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """x_t = (1 - t) * noise + t * data, with ``t`` broadcast over the leading axis."""
    t = t.reshape(-1, *([1] * (data.ndim - 1))).to(data.dtype)
    return (1 - t) * noise + t * data


def target_velocity(noise: torch.Tensor, data: torch.Tensor) -> torch.Tensor:
    return data - noise


def fm_loss(
    model: VelocityFn,
    context: torch.Tensor,
    target: torch.Tensor,
    timestamps: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared velocity error over the target frames.

    Draws one flow time per batch element and independent unit Gaussian
    noise per target value. Call ``backward()`` on the result for gradients.
    """
    B = target.shape[0]
    t = torch.rand(B, generator=generator, dtype=target.dtype)
    noise = torch.randn(target.shape, generator=generator, dtype=target.dtype)
    pred = model(context, interpolate(noise, target, t), t, timestamps)
    loss = torch.mean((pred - target_velocity(noise, target)) ** 2)
    if not torch.isfinite(loss):
        raise FlowDivergenceError(
            f"non-finite flow loss: t={t.tolist()}, |context|={float(context.norm()):.3g}, "
            f"|target|={float(target.norm()):.3g}"
        )
    return loss


@torch.no_grad()
def euler_integrate(
    model: VelocityFn,
    context: torch.Tensor,
    x0: torch.Tensor,
    timestamps: torch.Tensor,
    sampler: SamplerConfig = SamplerConfig(),
) -> torch.Tensor:
    """Integrate dx/dt = v(x, t) from t=0 to t=1 on a uniform grid."""
    x = x0
    dt = 1.0 / sampler.n_steps
    B = x.shape[0]
    for i in range(sampler.n_steps):
        t = torch.full((B,), i * dt, dtype=x.dtype)
        x = x + dt * model(context, x, t, timestamps)
        if not torch.isfinite(x).all():
            raise FlowDivergenceError(f"sampler state non-finite at step {i}")
    return x


def sample(
    model: VelocityFn,
    context: torch.Tensor,
    timestamps: torch.Tensor,
    n_target_frames: int,
    seed: int | None = None,
    sampler: SamplerConfig = SamplerConfig(),
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw target frames [B, N, c, h, w] conditioned on ``context`` [B, K, c, h, w]."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    shape = (context.shape[0], n_target_frames) + tuple(context.shape[2:])
    x0 = torch.randn(shape, generator=generator, dtype=context.dtype)
    return euler_integrate(model, context, x0, timestamps, sampler)


def member_seed(base_seed: int, member: int) -> int:
    """Independent 63-bit seed for ensemble member ``member``."""
    state = np.random.SeedSequence([int(base_seed), int(member)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1
