"""Rotary position encodings (temporal 1-D and 3-D) and the learned spatial table."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    axis_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if self.axis_split is not None:
            if any(d % 2 or d < 0 for d in self.axis_split) or sum(self.axis_split) != self.head_dim:
                raise ValueError(f"axis_split {self.axis_split} must be even and sum to {self.head_dim}")

    @classmethod
    def for_3d(cls, head_dim: int, base: float = 10000.0) -> "RopeConfig":
        """Default split: half for time, a quarter each for lat and lon."""
        q = head_dim // 4
        if q % 2:
            q -= 1
        return cls(head_dim, base, (head_dim - 2 * q, q, q))


def rope_angles(positions: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    """Angles [..., dim/2] = position * base^(-2i/dim)."""
    inv_freq = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = positions.to(torch.float64)[..., None] * inv_freq
    return ang


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs (x[2i], x[2i+1]) by ``angles[..., i]``."""
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, config: RopeConfig) -> torch.Tensor:
    """Rotate vectors [..., n, head_dim] by integer positions [n]."""
    if x.shape[-1] != config.head_dim:
        raise ValueError(f"last dim {x.shape[-1]} != head_dim {config.head_dim}")
    return _rotate_pairs(x, rope_angles(torch.as_tensor(positions), config.head_dim, config.base))


def rope3d_rotate(
    x: torch.Tensor,
    time_pos: torch.Tensor,
    lat_pos: torch.Tensor,
    lon_pos: torch.Tensor,
    config: RopeConfig,
) -> torch.Tensor:
    """Rotate consecutive sub-blocks of the head dimension by time, lat and lon positions."""
    if config.axis_split is None:
        raise ValueError("rope3d needs axis_split")
    if x.shape[-1] != config.head_dim:
        raise ValueError(f"last dim {x.shape[-1]} != head_dim {config.head_dim}")
    parts = []
    start = 0
    for dim, pos in zip(config.axis_split, (time_pos, lat_pos, lon_pos)):
        block = x[..., start : start + dim]
        if dim:
            block = _rotate_pairs(block, rope_angles(torch.as_tensor(pos), dim, config.base))
        parts.append(block)
        start += dim
    return torch.cat(parts, dim=-1)


class SpatialEmbedding(nn.Module):
    """Learned row per latent grid point, added to every frame."""

    def __init__(self, n_points: int, d_model: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n_points, d_model))
        nn.init.trunc_normal_(self.table, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return apply_spatial_embed(tokens, self.table)


def apply_spatial_embed(tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Add ``table[s]`` to every token at spatial slot ``s``.

    ``tokens`` is [..., T*S, d] in time-major order.
    """
    S, d = table.shape
    n = tokens.shape[-2]
    if tokens.shape[-1] != d or n % S:
        raise ValueError(f"tokens {tuple(tokens.shape)} incompatible with table {tuple(table.shape)}")
    lead = tokens.shape[:-2]
    out = tokens.reshape(*lead, n // S, S, d) + table
    return out.reshape(*lead, n, d)
