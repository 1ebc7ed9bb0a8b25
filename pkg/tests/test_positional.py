import numpy as np
import pytest
import torch

from latentcast.positional import RopeConfig, SpatialEmbedding, apply_spatial_embed, rope3d_rotate, rope_rotate


def unit(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*shape, generator=g, dtype=torch.float64)
    return (x / x.norm(dim=-1, keepdim=True)).to(dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        RopeConfig(7)
    with pytest.raises(ValueError):
        RopeConfig(8, axis_split=(4, 2, 4))
    assert RopeConfig.for_3d(32).axis_split == (16, 8, 8)
    assert sum(RopeConfig.for_3d(24).axis_split) == 24


def test_position_zero_is_identity():
    x = unit(5, 16)
    cfg = RopeConfig(16)
    torch.testing.assert_close(rope_rotate(x, torch.zeros(5, dtype=torch.long), cfg), x, rtol=0, atol=0)
    c3 = RopeConfig.for_3d(16)
    z = torch.zeros(5, dtype=torch.long)
    torch.testing.assert_close(rope3d_rotate(x, z, z, z, c3), x, rtol=0, atol=0)


def test_norm_preserved():
    cfg = RopeConfig(32)
    x = torch.randn(200, 32)
    pos = torch.randint(0, 513, (200,))
    y = rope_rotate(x, pos, cfg)
    assert torch.max(torch.abs(y.norm(dim=-1) - x.norm(dim=-1)) / x.norm(dim=-1)) <= 1e-6
    c3 = RopeConfig.for_3d(32)
    y3 = rope3d_rotate(x, pos, pos.flip(0), pos // 3, c3)
    assert torch.max(torch.abs(y3.norm(dim=-1) - x.norm(dim=-1)) / x.norm(dim=-1)) <= 1e-6


def _logit(q, k, pq, pk, cfg):
    return (rope_rotate(q[None], torch.tensor([pq]), cfg) * rope_rotate(k[None], torch.tensor([pk]), cfg)).sum()


def test_relative_shift_example():
    cfg = RopeConfig(16)
    q, k = unit(2, 16, seed=1)
    assert abs(_logit(q, k, 7, 3, cfg) - _logit(q, k, 14, 10, cfg)) <= 1e-5


def test_relative_shift_invariance_random():
    cfg = RopeConfig(64)
    rng = np.random.default_rng(0)
    qs, ks = unit(100, 64, seed=2), unit(100, 64, seed=3)
    worst = 0.0
    for i in range(100):
        a, b = rng.integers(0, 513, size=2)
        shift = int(rng.integers(-min(a, b), 513 - max(a, b)))
        d = abs(float(_logit(qs[i], ks[i], a, b, cfg) - _logit(qs[i], ks[i], a + shift, b + shift, cfg)))
        worst = max(worst, d)
    assert worst <= 1e-5


def test_rope3d_block_independence_exact():
    cfg = RopeConfig.for_3d(32)
    dt, dl, _ = cfg.axis_split
    x = unit(6, 32, seed=4)
    t = torch.arange(6)
    lat = torch.tensor([0, 1, 2, 0, 1, 2])
    lon = torch.tensor([0, 0, 0, 1, 1, 1])
    base = rope3d_rotate(x, t, lat, lon, cfg)
    moved = rope3d_rotate(x, t, lat + 5, lon, cfg)
    assert torch.equal(base[:, :dt], moved[:, :dt])
    assert torch.equal(base[:, dt + dl :], moved[:, dt + dl :])
    assert not torch.equal(base[:, dt : dt + dl], moved[:, dt : dt + dl])
    # time sub-block equals plain 1-D rope over the same sub-dimension
    torch.testing.assert_close(base[:, :dt], rope_rotate(x[:, :dt], t, RopeConfig(dt)), rtol=0, atol=0)


def test_rope3d_joint_shift_invariance():
    cfg = RopeConfig.for_3d(32)
    q, k = unit(2, 32, seed=5)

    def logit(pq, pk):
        a = rope3d_rotate(q[None], *[torch.tensor([v]) for v in pq], cfg)
        b = rope3d_rotate(k[None], *[torch.tensor([v]) for v in pk], cfg)
        return float((a * b).sum())

    ref = logit((3, 1, 4), (1, 5, 2))
    assert abs(ref - logit((3 + 9, 1 + 2, 4 + 7), (1 + 9, 5 + 2, 2 + 7))) <= 1e-5


def test_spatial_embed_zero_table_and_time_independence():
    tokens = torch.randn(2, 3 * 4, 8)
    torch.testing.assert_close(apply_spatial_embed(tokens, torch.zeros(4, 8)), tokens, rtol=0, atol=0)
    table = torch.randn(4, 8)
    out = apply_spatial_embed(tokens, table)
    diff_in = tokens[:, 0:4] - tokens[:, 4:8]
    diff_out = out[:, 0:4] - out[:, 4:8]
    torch.testing.assert_close(diff_out, diff_in)
    with pytest.raises(ValueError):
        apply_spatial_embed(torch.randn(1, 10, 8), table)


def test_spatial_embed_gradient_matches_finite_differences():
    torch.manual_seed(0)
    T, S, d = 3, 4, 5
    tokens = torch.randn(T * S, d, dtype=torch.float64)
    table = torch.randn(S, d, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(T * S, d, dtype=torch.float64)

    def loss(tab):
        return (torch.tanh(apply_spatial_embed(tokens, tab)) * weight).sum()

    loss(table).backward()
    # chain rule: row s gathers the token gradients at slot s over frames
    tok = apply_spatial_embed(tokens, table.detach()).requires_grad_(True)
    (torch.tanh(tok) * weight).sum().backward()
    summed = tok.grad.reshape(T, S, d).sum(0)
    torch.testing.assert_close(table.grad, summed)
    eps = 1e-6
    fd = torch.zeros_like(table)
    with torch.no_grad():
        for s in range(S):
            for j in range(d):
                e = torch.zeros_like(table)
                e[s, j] = eps
                fd[s, j] = (loss(table + e) - loss(table - e)) / (2 * eps)
    torch.testing.assert_close(table.grad, fd, rtol=1e-6, atol=1e-8)


def test_spatial_module_gets_gradient():
    emb = SpatialEmbedding(6, 4)
    tokens = torch.randn(2, 12, 4)
    (emb(tokens) ** 2).sum().backward()
    assert emb.table.grad is not None and emb.table.grad.abs().sum() > 0
