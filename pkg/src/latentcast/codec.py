"""Patch autoencoder mapping pixel frames to a compact latent grid."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .grid import CalendarTime, FieldSequence, slot_indices

logger = logging.getLogger(__name__)


class CodecShapeError(ValueError):
    pass


class CodecDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 4
    latent_channels: int = 5
    hidden: int = 64

    def __post_init__(self):
        if self.patch < 1 or self.latent_channels < 1 or self.hidden < 1:
            raise ValueError(f"invalid codec config {self}")

    def compression_ratio(self, n_channels: int) -> float:
        """Pixel values per latent value: p^2 * C / c_z."""
        return self.patch**2 * n_channels / self.latent_channels


@dataclass(frozen=True)
class LatentSequence:
    """Time-ordered latent frames shaped [T, c_z, h, w]."""

    values: np.ndarray
    start: CalendarTime
    step_hours: int = 6
    provenance: str = ""

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[0] < 1:
            raise CodecShapeError(f"latent values must be [T, c, h, w], got {self.values.shape}")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    def slots(self) -> np.ndarray:
        return slot_indices(self.start, self.n_steps, self.step_hours)

    def slice(self, t0: int, t1: int) -> "LatentSequence":
        return dataclasses.replace(
            self, values=self.values[t0:t1], start=self.start.advance(self.step_hours * t0, steps=t0)
        )


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[N, C, H, W] -> [N, H/p, W/p, C*p*p]."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise CodecShapeError(f"grid {h}x{w} not divisible by patch {p}")
    x = x.reshape(n, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(n, h // p, w // p, c * p * p)


def unpatchify(z: torch.Tensor, p: int, c: int) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    n, hp, wp, _ = z.shape
    z = z.reshape(n, hp, wp, c, p, p)
    return z.permute(0, 3, 1, 4, 2, 5).reshape(n, c, hp * p, wp * p)


class PatchAutoencoder(nn.Module):
    """Per-patch affine -> GELU -> affine, in both directions."""

    def __init__(self, n_channels: int, config: CodecConfig):
        super().__init__()
        self.n_channels = n_channels
        self.config = config
        d = n_channels * config.patch**2
        self.enc_in = nn.Linear(d, config.hidden)
        self.enc_out = nn.Linear(config.hidden, config.latent_channels)
        self.dec_in = nn.Linear(config.latent_channels, config.hidden)
        self.dec_out = nn.Linear(config.hidden, d)
        self.act = nn.GELU()

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Standardized frames [N, C, H, W] -> latents [N, c_z, H/p, W/p]."""
        if x.shape[1] != self.n_channels:
            raise CodecShapeError(f"expected {self.n_channels} channels, got {x.shape[1]}")
        z = self.enc_out(self.act(self.enc_in(patchify(x, self.config.patch))))
        return z.permute(0, 3, 1, 2)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.config.latent_channels:
            raise CodecShapeError(f"expected {self.config.latent_channels} latent channels, got {z.shape[1]}")
        y = self.dec_out(self.act(self.dec_in(z.permute(0, 2, 3, 1))))
        return unpatchify(y, self.config.patch, self.n_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def _as_array(X) -> np.ndarray:
    values = X.values if isinstance(X, FieldSequence) else np.asarray(X)
    if values.ndim == 3:
        values = values[None]
    if values.ndim != 4:
        raise CodecShapeError(f"expected [T, C, H, W] data, got shape {values.shape}")
    return values


class PatchCodec(TransformerMixin, BaseEstimator):
    """Trainable patch autoencoder with per-channel z-score normalization.

    ``transform`` maps [T, C, H, W] fields to [T, c_z, H/p, W/p] latents and
    ``inverse_transform`` maps back to physical units.
    """

    def __init__(
        self,
        patch: int = 4,
        latent_channels: int = 5,
        hidden: int = 64,
        steps: int = 3000,
        lr: float = 3e-3,
        batch_size: int = 512,
        seed: int = 0,
    ):
        self.patch = patch
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    @property
    def config(self) -> CodecConfig:
        return CodecConfig(self.patch, self.latent_channels, self.hidden)

    def _init_module(self, n_channels: int) -> None:
        torch.manual_seed(self.seed)
        self.module_ = PatchAutoencoder(n_channels, self.config)
        self.n_channels_ = n_channels

    def fit(self, X, y=None):
        values = _as_array(X)
        _, C, H, W = values.shape
        if H % self.patch or W % self.patch:
            raise CodecShapeError(f"grid {H}x{W} not divisible by patch {self.patch}")
        self.mean_ = values.mean(axis=(0, 2, 3), dtype=np.float64)
        std = values.std(axis=(0, 2, 3), dtype=np.float64)
        self.scale_ = np.where(std > 0, std, 1.0)
        self._init_module(C)
        self.loss_curve_ = self._train(self.standardize(values))
        return self

    def _train(self, data: np.ndarray) -> list[float]:
        patches = patchify(torch.from_numpy(data), self.patch).reshape(-1, self.n_channels_ * self.patch**2)
        gen = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.Adam(self.module_.parameters(), lr=self.lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(self.steps, 1))
        net = self.module_
        curve = []
        for step in range(self.steps):
            idx = torch.randint(0, patches.shape[0], (self.batch_size,), generator=gen)
            x = patches[idx]
            h = net.enc_out(net.act(net.enc_in(x)))
            recon = net.dec_out(net.act(net.dec_in(h)))
            loss = torch.mean((recon - x) ** 2)
            if not torch.isfinite(loss):
                raise CodecDivergenceError(f"codec loss non-finite at step {step} (lr={self.lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            curve.append(loss.item())
            if step % 500 == 0:
                logger.info("codec step %d loss %.5f", step, curve[-1])
        return curve

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean_[:, None, None]) / self.scale_[:, None, None]).astype(np.float32)

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return (values * self.scale_[:, None, None] + self.mean_[:, None, None]).astype(np.float32)

    @torch.no_grad()
    def transform(self, X, batch: int = 256):
        check_is_fitted(self, "module_")
        values = self.standardize(_as_array(X))
        out = [
            self.module_.encode(torch.from_numpy(values[i : i + batch])).numpy()
            for i in range(0, len(values), batch)
        ]
        z = np.concatenate(out)
        if isinstance(X, FieldSequence):
            return LatentSequence(z, X.start, X.step_hours, self.fingerprint())
        return z

    @torch.no_grad()
    def inverse_transform(self, Z, batch: int = 256) -> np.ndarray:
        check_is_fitted(self, "module_")
        z = Z.values if isinstance(Z, LatentSequence) else np.asarray(Z, dtype=np.float32)
        if z.ndim == 3:
            z = z[None]
        out = [
            self.module_.decode(torch.from_numpy(np.ascontiguousarray(z[i : i + batch]))).numpy()
            for i in range(0, len(z), batch)
        ]
        return self.destandardize(np.concatenate(out))

    def encode(self, frame: np.ndarray) -> np.ndarray:
        """Encode one [C, H, W] frame."""
        if np.ndim(frame) != 3:
            raise CodecShapeError("encode takes a single [C, H, W] frame")
        return self.transform(frame)[0]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Decode one [c_z, h, w] latent frame."""
        if np.ndim(latent) != 3:
            raise CodecShapeError("decode takes a single [c_z, h, w] latent frame")
        return self.inverse_transform(latent)[0]

    def reconstruction_error(self, X) -> float:
        """Relative RMSE of decode(encode(x)) in standardized units."""
        values = _as_array(X)
        recon = self.inverse_transform(self.transform(values))
        a, b = self.standardize(values), self.standardize(recon)
        return float(np.sqrt(np.mean((a - b) ** 2, dtype=np.float64) / np.mean(a.astype(np.float64) ** 2)))

    def fingerprint(self) -> str:
        check_is_fitted(self, "module_")
        h = hashlib.sha256()
        for name, t in self.module_.state_dict().items():
            h.update(name.encode())
            h.update(t.numpy().astype("<f4").tobytes())
        h.update(np.asarray(self.mean_, "<f8").tobytes())
        h.update(np.asarray(self.scale_, "<f8").tobytes())
        return h.hexdigest()[:16]


def pca_patch_error(train, test, patch: int, n_components: int, mean=None, scale=None) -> float:
    """Relative RMSE of the best rank-``n_components`` affine patch reconstruction.

    Fitted on ``train`` patches and scored on ``test`` in standardized units,
    using the given per-channel statistics (computed from ``train`` if omitted).
    """
    tr, te = _as_array(train).astype(np.float64), _as_array(test).astype(np.float64)
    if mean is None:
        mean = tr.mean(axis=(0, 2, 3))
        scale = tr.std(axis=(0, 2, 3))
        scale = np.where(scale > 0, scale, 1.0)
    tr = (tr - mean[:, None, None]) / scale[:, None, None]
    te = (te - mean[:, None, None]) / scale[:, None, None]
    d = tr.shape[1] * patch * patch
    P = patchify(torch.from_numpy(tr), patch).reshape(-1, d).numpy()
    Q = patchify(torch.from_numpy(te), patch).reshape(-1, d).numpy()
    pca = PCA(n_components=n_components, svd_solver="full").fit(P)
    recon = pca.inverse_transform(pca.transform(Q))
    return float(np.sqrt(np.mean((recon - Q) ** 2) / np.mean(Q**2)))


def train_codec(data: FieldSequence, config: CodecConfig, steps: int, lr: float, seed: int = 0):
    """Fit a :class:`PatchCodec`; returns ``(codec, loss_curve)``."""
    codec = PatchCodec(config.patch, config.latent_channels, config.hidden, steps=steps, lr=lr, seed=seed)
    codec.fit(data)
    return codec, codec.loss_curve_


def encode(codec: PatchCodec, frame: np.ndarray) -> np.ndarray:
    return codec.encode(frame)


def decode(codec: PatchCodec, latent: np.ndarray) -> np.ndarray:
    return codec.decode(latent)
