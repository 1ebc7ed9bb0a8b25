"""Checkpoint files: JSON manifest plus a raw little-endian float32 blob.

Layout: 8-byte magic ``MRCKPT01``, little-endian uint64 manifest length,
UTF-8 JSON manifest, blob. The manifest lists every tensor with its shape,
byte offset and byte length; entries must tile the blob exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from typing import Any

import numpy as np
import torch

from .codec import PatchCodec
from .dit import DitConfig
from .forecaster import LatentFlowForecaster, RolloutConfig, TrainConfig, make_optimizer

MAGIC = b"MRCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    """Tensor directory inconsistent with the blob."""


def pack(tensors: dict[str, np.ndarray], manifest: dict[str, Any]) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = dict(manifest, format_version=FORMAT_VERSION, tensors=directory, blob_bytes=offset)
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(chunks)


def unpack(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    off = len(MAGIC)
    if len(buf) < off + 8:
        raise CheckpointError("truncated checkpoint header")
    (mlen,) = struct.unpack_from("<Q", buf, off)
    off += 8
    try:
        manifest = json.loads(buf[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {manifest.get('format_version')} != {FORMAT_VERSION}")
    blob = buf[off + mlen :]
    if len(blob) != manifest["blob_bytes"]:
        raise ManifestError(f"blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")
    tensors = {}
    expected = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != expected or entry["nbytes"] != nbytes:
            raise ManifestError(f"tensor {entry['name']!r} at offset {entry['offset']} does not tile the blob")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=expected).reshape(shape).copy()
        expected += nbytes
    if expected != len(blob):
        raise ManifestError("manifest tensors do not cover the blob")
    return tensors, manifest


def _config_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _from_dict(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in d.items():
        if k not in names:
            raise CheckpointError(f"unknown {cls.__name__} field {k!r}")
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def save_checkpoint(
    path: str | os.PathLike,
    forecaster: LatentFlowForecaster | None = None,
    codec: PatchCodec | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write network, optimizer moments, codec, normalization stats and configs.

    Either part may be omitted (a codec-only checkpoint is valid).
    """
    tensors: dict[str, np.ndarray] = {}
    manifest: dict[str, Any] = {"meta": meta or {}}
    if forecaster is not None:
        _add_forecaster(tensors, manifest, forecaster)
    if codec is not None:
        for name, p in codec.module_.state_dict().items():
            tensors[f"codec/{name}"] = p.detach().numpy()
        manifest["codec"] = {
            "params": codec.get_params(),
            "n_channels": codec.n_channels_,
            "mean": [float(x) for x in codec.mean_],
            "scale": [float(x) for x in codec.scale_],
        }
    with open(path, "wb") as fh:
        fh.write(pack(tensors, manifest))


def _add_forecaster(tensors: dict, manifest: dict, forecaster: LatentFlowForecaster) -> None:
    for name, p in forecaster.network_.state_dict().items():
        tensors[f"dit/{name}"] = p.detach().numpy()
    manifest.update(
        {
            "dit_config": _config_dict(forecaster.model_config_),
            "train_config": _config_dict(forecaster.training),
            "rollout_config": _config_dict(forecaster.rollout),
            "step_hours": forecaster.step_hours_,
            "latent_mean": [float(x) for x in forecaster.latent_mean_],
            "latent_scale": [float(x) for x in forecaster.latent_scale_],
            "train_log": getattr(forecaster, "log_", []),
        }
    )
    opt = getattr(forecaster, "optimizer_", None)
    if opt is not None:
        optim, sched = opt
        names = [n for n, _ in forecaster.network_.named_parameters()]
        state = optim.state_dict()["state"]
        steps = {}
        for i, name in enumerate(names):
            if i in state:
                tensors[f"optim/{name}/exp_avg"] = state[i]["exp_avg"].numpy()
                tensors[f"optim/{name}/exp_avg_sq"] = state[i]["exp_avg_sq"].numpy()
                steps[name] = float(state[i]["step"])
        manifest["optimizer"] = {"steps": steps, "scheduler_epoch": sched.last_epoch}


def load_checkpoint(
    path: str | os.PathLike,
) -> tuple[LatentFlowForecaster | None, PatchCodec | None, dict[str, Any]]:
    """Inverse of :func:`save_checkpoint`; returns (forecaster, codec, manifest)."""
    with open(path, "rb") as fh:
        tensors, manifest = unpack(fh.read())
    forecaster = _load_forecaster(tensors, manifest) if "dit_config" in manifest else None
    codec = None
    if "codec" in manifest:
        info = manifest["codec"]
        codec = PatchCodec(**info["params"])
        codec._init_module(info["n_channels"])
        cstate = {k[len("codec/") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("codec/")}
        try:
            codec.module_.load_state_dict(cstate, strict=True)
        except RuntimeError as exc:
            raise ManifestError(str(exc)) from exc
        codec.mean_ = np.asarray(info["mean"])
        codec.scale_ = np.asarray(info["scale"])
        codec.loss_curve_ = []
    return forecaster, codec, manifest


def _load_forecaster(tensors: dict, manifest: dict) -> LatentFlowForecaster:
    dit_cfg = _from_dict(DitConfig, manifest["dit_config"])
    forecaster = LatentFlowForecaster(
        model=dit_cfg,
        training=_from_dict(TrainConfig, manifest["train_config"]),
        rollout=_from_dict(RolloutConfig, manifest["rollout_config"]),
    )
    forecaster.init_network((dit_cfg.latent_channels, dit_cfg.latent_h, dit_cfg.latent_w), manifest["step_hours"])
    state = {k[len("dit/") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("dit/")}
    try:
        forecaster.network_.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ManifestError(str(exc)) from exc
    forecaster.latent_mean_ = np.asarray(manifest["latent_mean"])
    forecaster.latent_scale_ = np.asarray(manifest["latent_scale"])
    forecaster.log_ = manifest.get("train_log", [])

    if "optimizer" in manifest:
        optim, sched = make_optimizer(forecaster.network_, forecaster.training)
        steps = manifest["optimizer"]["steps"]
        osd = optim.state_dict()
        for i, (name, _) in enumerate(forecaster.network_.named_parameters()):
            if name in steps:
                osd["state"][i] = {
                    "step": torch.tensor(steps[name]),
                    "exp_avg": torch.from_numpy(tensors[f"optim/{name}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim/{name}/exp_avg_sq"]),
                }
        optim.load_state_dict(osd)
        sched.last_epoch = manifest["optimizer"]["scheduler_epoch"]
        forecaster.optimizer_ = (optim, sched)
    return forecaster
