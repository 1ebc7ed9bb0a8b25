"""Cross-DiT velocity network.

Tokens are latent grid points of the context frames followed by the noisy
target frames (time-major). Each block runs modulated self-attention with
rotary positions, cross-attention onto per-frame calendar embeddings, and a
modulated MLP. Flow-time modulation comes from one shared MLP head plus a
low-rank correction per block.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .grid import HOURS_PER_YEAR
from .positional import RopeConfig, SpatialEmbedding, rope3d_rotate, rope_rotate

POSITIONAL_SCHEMES = ("rope1d+trainable2d", "rope3d")
XATTN_KV = ("timestamps", "concat")


@dataclass(frozen=True)
class DitConfig:
    latent_channels: int = 20
    latent_h: int = 3
    latent_w: int = 6
    d_model: int = 192
    n_heads: int = 6
    n_blocks: int = 8
    mlp_ratio: float = 4.0
    lora_rank: int = 8
    timestamp_embed_dim: int = 64
    time_freq_dim: int = 256
    max_context_frames: int = 4
    max_target_frames: int = 32
    positional: str = "rope1d+trainable2d"
    rope_base: float = 10000.0
    xattn_kv: str = "timestamps"
    use_timestamps: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.max_context_frames < 1 or self.max_target_frames < 1:
            raise ValueError("frame maxima must be >= 1")
        if self.positional not in POSITIONAL_SCHEMES:
            raise ValueError(f"positional must be one of {POSITIONAL_SCHEMES}")
        if self.xattn_kv not in XATTN_KV:
            raise ValueError(f"xattn_kv must be one of {XATTN_KV}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_points(self) -> int:
        return self.latent_h * self.latent_w

    @property
    def rope(self) -> RopeConfig:
        if self.positional == "rope3d":
            return RopeConfig.for_3d(self.head_dim, self.rope_base)
        return RopeConfig(self.head_dim, self.rope_base)

    def replace(self, **kw) -> "DitConfig":
        return dataclasses.replace(self, **kw)


def flow_time_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * t`` for t in [0, 1], shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = 1000.0 * t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(t.dtype if t.is_floating_point() else torch.get_default_dtype())


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Softmax(q k^T / sqrt(d)) over the key axis."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


class SharedModulation(nn.Module):
    """Shared two-layer head emitting 6*d modulation values, plus per-block LoRA.

    The LoRA pair for block b adds ``B_b @ A_b @ h`` where ``h`` is the hidden
    activation of the shared head.
    """

    def __init__(self, config: DitConfig):
        super().__init__()
        d, hidden = config.d_model, config.d_model
        self.freq_dim = config.time_freq_dim
        self.fc1 = nn.Linear(config.time_freq_dim, hidden)
        self.fc2 = nn.Linear(hidden, 6 * d)
        r = config.lora_rank
        self.lora_A = nn.Parameter(torch.empty(config.n_blocks, r, hidden))
        self.lora_B = nn.Parameter(torch.zeros(config.n_blocks, 6 * d, r))
        nn.init.trunc_normal_(self.fc1.weight, std=0.02)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        nn.init.trunc_normal_(self.lora_A, std=0.02)

    def hidden(self, t: torch.Tensor) -> torch.Tensor:
        return F.silu(self.fc1(flow_time_embedding(t, self.freq_dim).to(self.fc1.weight.dtype)))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        """Modulation for every block, shape [n_blocks, B, 6*d]."""
        h = self.hidden(t)
        shared = self.fc2(h)
        low_rank = torch.einsum("bh,nrh,nor->nbo", h, self.lora_A, self.lora_B)
        return shared.unsqueeze(0) + low_rank


def _trunc(linear: nn.Linear, zero: bool = False) -> nn.Linear:
    if zero:
        nn.init.zeros_(linear.weight)
    else:
        nn.init.trunc_normal_(linear.weight, std=0.02)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)
    return linear


class CrossDiTBlock(nn.Module):
    def __init__(self, config: DitConfig):
        super().__init__()
        d = config.d_model
        self.config = config
        self.n_heads = config.n_heads
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.qkv = _trunc(nn.Linear(d, 3 * d))
        self.attn_out = _trunc(nn.Linear(d, d))
        if config.use_timestamps:
            self.norm_x = nn.LayerNorm(d, eps=1e-6)
            self.xq = _trunc(nn.Linear(d, d))
            self.xkv = _trunc(nn.Linear(config.timestamp_embed_dim, 2 * d))
            if config.xattn_kv == "concat":
                self.xkv_tokens = _trunc(nn.Linear(d, 2 * d))
            self.xout = _trunc(nn.Linear(d, d), zero=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        hidden = int(d * config.mlp_ratio)
        self.mlp_in = _trunc(nn.Linear(d, hidden))
        self.mlp_out = _trunc(nn.Linear(hidden, d))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, -1).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        B, _, L, _ = x.shape
        return x.transpose(1, 2).reshape(B, L, -1)

    def self_attention(self, x: torch.Tensor, positions: tuple[torch.Tensor, ...]) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        rope = self.config.rope
        if self.config.positional == "rope3d":
            q = rope3d_rotate(q, *positions, rope)
            k = rope3d_rotate(k, *positions, rope)
        else:
            q = rope_rotate(q, positions[0], rope)
            k = rope_rotate(k, positions[0], rope)
        return self.attn_out(self._merge(F.scaled_dot_product_attention(q, k, v)))

    def cross_attention(self, x: torch.Tensor, ts_rows: torch.Tensor) -> torch.Tensor:
        h = self.norm_x(x)
        q = self._heads(self.xq(h))
        kv = self.xkv(ts_rows)
        if self.config.xattn_kv == "concat":
            kv = torch.cat([kv, self.xkv_tokens(h)], dim=1)
        k, v = kv.chunk(2, dim=-1)
        out = F.scaled_dot_product_attention(q, self._heads(k), self._heads(v))
        return self.xout(self._merge(out))

    def forward(
        self,
        x: torch.Tensor,
        ts_rows: torch.Tensor | None,
        mod: torch.Tensor,
        positions: tuple[torch.Tensor, ...],
    ) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = mod.chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.self_attention(modulate(self.norm1(x), shift1, scale1), positions)
        if ts_rows is not None:
            x = x + self.cross_attention(x, ts_rows)
        h = modulate(self.norm2(x), shift2, scale2)
        h = self.mlp_out(F.gelu(self.mlp_in(h), approximate="tanh"))
        return x + gate2.unsqueeze(1) * h


class CrossDiT(nn.Module):
    """Velocity network v(context, x_t, t, timestamps) -> [B, N, c_z, h, w]."""

    def __init__(self, config: DitConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.latent_proj = _trunc(nn.Linear(config.latent_channels, d))
        self.context_flag = nn.Parameter(torch.empty(d))
        nn.init.trunc_normal_(self.context_flag, std=0.02)
        if config.positional == "rope1d+trainable2d":
            self.spatial = SpatialEmbedding(config.n_points, d)
        if config.use_timestamps:
            self.timestamp_table = nn.Parameter(torch.empty(HOURS_PER_YEAR, config.timestamp_embed_dim))
            nn.init.trunc_normal_(self.timestamp_table, std=0.02)
        self.modulation = SharedModulation(config)
        self.blocks = nn.ModuleList(CrossDiTBlock(config) for _ in range(config.n_blocks))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.head = _trunc(nn.Linear(d, config.latent_channels), zero=True)

    def tokenize(self, context: torch.Tensor, noisy_target: torch.Tensor) -> torch.Tensor:
        """[B, K, c, h, w] and [B, N, c, h, w] -> tokens [B, (K+N)*h*w, d]."""
        cfg = self.config
        K, N = context.shape[1], noisy_target.shape[1]
        if K > cfg.max_context_frames or N > cfg.max_target_frames:
            raise ValueError(f"frames K={K}, N={N} exceed configured maxima")
        if context.shape[2:] != (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
            raise ValueError(f"context latent shape {tuple(context.shape[2:])} does not match config")
        if noisy_target.shape[2:] != context.shape[2:]:
            raise ValueError("target latent shape differs from context")
        x = torch.cat([context, noisy_target], dim=1)
        B, Fr, c, h, w = x.shape
        tokens = self.latent_proj(x.permute(0, 1, 3, 4, 2).reshape(B, Fr * h * w, c))
        flag = torch.zeros(Fr * h * w, 1, dtype=tokens.dtype)
        flag[: K * h * w] = 1
        tokens = tokens + flag * self.context_flag
        if cfg.positional == "rope1d+trainable2d":
            tokens = self.spatial(tokens)
        return tokens

    def positions(self, n_frames: int) -> tuple[torch.Tensor, ...]:
        """Per-token (frame, lat, lon) indices in time-major order."""
        h, w = self.config.latent_h, self.config.latent_w
        frame = torch.arange(n_frames).repeat_interleave(h * w)
        lat = torch.arange(h).repeat_interleave(w).repeat(n_frames)
        lon = torch.arange(w).repeat(h * n_frames)
        return frame, lat, lon

    def timestamp_rows(self, timestamps: torch.Tensor) -> torch.Tensor | None:
        if not self.config.use_timestamps:
            return None
        return self.timestamp_table[timestamps]

    def run_block(
        self, b: int, tokens: torch.Tensor, timestamps: torch.Tensor, flow_time: torch.Tensor
    ) -> torch.Tensor:
        """Apply block ``b`` alone (tokens [B, L, d], timestamps [B, frames])."""
        mod = self.modulation(flow_time)[b]
        n_frames = tokens.shape[1] // self.config.n_points
        return self.blocks[b](tokens, self.timestamp_rows(timestamps), mod, self.positions(n_frames))

    def forward(
        self,
        context: torch.Tensor,
        noisy_target: torch.Tensor,
        flow_time: torch.Tensor,
        timestamps: torch.Tensor,
    ) -> torch.Tensor:
        K, N = context.shape[1], noisy_target.shape[1]
        if timestamps.shape[-1] != K + N:
            raise ValueError(f"need {K + N} timestamps per sample, got {timestamps.shape[-1]}")
        if flow_time.ndim == 0:
            flow_time = flow_time.expand(context.shape[0])
        x = self.tokenize(context, noisy_target)
        mods = self.modulation(flow_time.to(x.dtype))
        ts_rows = self.timestamp_rows(timestamps)
        positions = self.positions(K + N)
        for b, block in enumerate(self.blocks):
            x = block(x, ts_rows, mods[b], positions)
        out = self.head(self.final_norm(x))
        cfg = self.config
        B = out.shape[0]
        out = out.reshape(B, K + N, cfg.latent_h, cfg.latent_w, cfg.latent_channels)
        return out[:, K:].permute(0, 1, 4, 2, 3)


def parameter_store(model: nn.Module) -> dict[str, torch.Tensor]:
    """Name -> parameter tensor, in registration order."""
    return dict(model.named_parameters())


def param_report(config: DitConfig) -> dict[str, float]:
    """Parameter counts with the modulation share, and the per-block-head alternative.

    ``per_block_hypothetical`` is what n_blocks independent copies of the
    shared head would cost; its fraction is taken against the total the
    model would have with those copies instead of shared head + LoRA.
    """
    model = CrossDiT(config)
    counts = {name: p.numel() for name, p in model.named_parameters()}
    total = sum(counts.values())
    shared = counts["modulation.fc1.weight"] + counts["modulation.fc1.bias"]
    shared += counts["modulation.fc2.weight"] + counts["modulation.fc2.bias"]
    lora = counts["modulation.lora_A"] + counts["modulation.lora_B"]
    modulation = shared + lora
    hypothetical = config.n_blocks * shared
    hypothetical_total = total - modulation + hypothetical
    return {
        "total": total,
        "modulation_shared": shared,
        "modulation_lora": lora,
        "modulation_total": modulation,
        "modulation_fraction": modulation / total,
        "per_block_hypothetical": hypothetical,
        "per_block_total": hypothetical_total,
        "per_block_fraction": hypothetical / hypothetical_total,
        "timestamp_table": counts.get("timestamp_table", 0),
    }
