import json
import struct

import numpy as np
import pytest
import torch

from latentcast.checkpoint import (
    MAGIC,
    CheckpointError,
    CheckpointVersionError,
    ManifestError,
    load_checkpoint,
    pack,
    save_checkpoint,
    unpack,
)
from latentcast.codec import LatentSequence, PatchCodec
from latentcast.dit import DitConfig
from latentcast.forecaster import LatentFlowForecaster, RolloutConfig, TrainConfig
from latentcast.grid import CalendarTime

DIT = DitConfig(
    d_model=16, n_heads=2, n_blocks=1, lora_rank=1, timestamp_embed_dim=8, time_freq_dim=16, max_target_frames=8
)


@pytest.fixture(scope="module")
def parts():
    rng = np.random.default_rng(0)
    fields = rng.standard_normal((60, 2, 8, 8)).astype(np.float32)
    codec = PatchCodec(4, 3, 8, steps=5).fit(fields)
    z = LatentSequence(codec.transform(fields), CalendarTime(1, 1, 0), 6)
    f = LatentFlowForecaster(
        DIT, TrainConfig(steps=4, batch_size=2, horizon_days_max=2), RolloutConfig(chunk_frames=8, horizon_days=2, n_members=2)
    ).fit(z)
    return f, codec, z


def test_round_trip_is_bitwise(tmp_path, parts):
    f, codec, z = parts
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, f, codec, meta={"note": "x"})
    g, c2, manifest = load_checkpoint(path)
    assert manifest["meta"] == {"note": "x"}
    for (n, p), (_, q) in zip(f.network_.state_dict().items(), g.network_.state_dict().items()):
        assert torch.equal(p, q), n
    for (n, p), (_, q) in zip(codec.module_.state_dict().items(), c2.module_.state_dict().items()):
        assert torch.equal(p, q), n
    np.testing.assert_array_equal(c2.mean_, codec.mean_)
    np.testing.assert_array_equal(g.latent_scale_, f.latent_scale_)
    assert g.model_config_ == f.model_config_ and g.training == f.training and g.rollout == f.rollout
    s1, s2 = f.optimizer_[0].state_dict()["state"], g.optimizer_[0].state_dict()["state"]
    assert s1.keys() == s2.keys()
    for k in s1:
        assert torch.equal(s1[k]["exp_avg_sq"], s2[k]["exp_avg_sq"])
    assert g.optimizer_[1].last_epoch == f.optimizer_[1].last_epoch
    # saving the loaded state reproduces the file byte for byte
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, g, c2, meta={"note": "x"})
    assert path.read_bytes() == path2.read_bytes()


def test_forecast_from_loaded_matches_in_memory(tmp_path, parts):
    f, codec, z = parts
    save_checkpoint(tmp_path / "m.ckpt", f, codec)
    g, c2, _ = load_checkpoint(tmp_path / "m.ckpt")
    a = f.predict(z.slice(0, 4), seed=9).latents
    b = g.predict(z.slice(0, 4), seed=9).latents
    assert a.tobytes() == b.tobytes()
    x = np.random.default_rng(1).standard_normal((3, 2, 8, 8)).astype(np.float32)
    assert codec.transform(x).tobytes() == c2.transform(x).tobytes()


def test_codec_only(tmp_path, parts):
    _, codec, _ = parts
    save_checkpoint(tmp_path / "c.ckpt", codec=codec)
    f, c2, manifest = load_checkpoint(tmp_path / "c.ckpt")
    assert f is None and c2 is not None and "dit_config" not in manifest


def test_offsets_tile_blob(parts, tmp_path):
    f, codec, _ = parts
    save_checkpoint(tmp_path / "m.ckpt", f, codec)
    _, manifest = unpack((tmp_path / "m.ckpt").read_bytes())
    end = 0
    for e in manifest["tensors"]:
        assert e["offset"] == end
        end += e["nbytes"]
    assert end == manifest["blob_bytes"]


def _rewrite(buf: bytes, edit) -> bytes:
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    manifest = json.loads(buf[16 : 16 + mlen])
    edit(manifest)
    text = json.dumps(manifest).encode()
    return MAGIC + struct.pack("<Q", len(text)) + text + buf[16 + mlen :]


def test_corrupted_offset_detected():
    buf = pack({"a": np.zeros(3), "b": np.ones(2)}, {})

    def shift(m):
        m["tensors"][1]["offset"] += 4

    with pytest.raises(ManifestError):
        unpack(_rewrite(buf, shift))


def test_wrong_shape_detected():
    buf = pack({"a": np.zeros((2, 3))}, {})

    def reshape(m):
        m["tensors"][0]["shape"] = [2, 2]

    with pytest.raises(ManifestError):
        unpack(_rewrite(buf, reshape))


def test_truncated_blob_and_bad_magic():
    buf = pack({"a": np.zeros(3)}, {})
    with pytest.raises(ManifestError):
        unpack(buf[:-1])
    with pytest.raises(CheckpointError):
        unpack(b"NOTCKPT0" + buf[8:])
    with pytest.raises(CheckpointError):
        unpack(buf[:10])


def test_version_mismatch():
    buf = pack({"a": np.zeros(3)}, {})

    def bump(m):
        m["format_version"] = 99

    with pytest.raises(CheckpointVersionError):
        unpack(_rewrite(buf, bump))


def test_missing_tensor_reported_as_manifest_error(tmp_path, parts):
    f, codec, _ = parts
    save_checkpoint(tmp_path / "m.ckpt", f)
    tensors, manifest = unpack((tmp_path / "m.ckpt").read_bytes())
    tensors.pop("dit/head.bias")
    manifest.pop("format_version")
    manifest.pop("tensors")
    manifest.pop("blob_bytes")
    (tmp_path / "bad.ckpt").write_bytes(pack(tensors, manifest))
    with pytest.raises(ManifestError):
        load_checkpoint(tmp_path / "bad.ckpt")
