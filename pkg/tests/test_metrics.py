import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcast.grid import CalendarTime, FieldSequence, GridSpec, latitude_weights
from latentcast.metrics import acc, crps_ensemble, crps_fields, event_probability, rmse, weighted_mse


def naive_crps(x, y):
    M = len(x)
    skill = sum(abs(a - y) for a in x) / M
    spread = 0.0 if M == 1 else sum(abs(a - b) for a in x for b in x) / (M * (M - 1))
    return skill - spread / 2, skill, spread


def test_crps_two_member_example():
    c, s, p = crps_ensemble(np.array([0.0, 2.0]), np.array(1.0))
    assert (float(c), float(s), float(p)) == (0.0, 1.0, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=9), st.floats(-100, 100))
def test_crps_matches_pairwise_definition(members, y):
    c, s, p = crps_ensemble(np.array(members), np.array(y))
    ref = naive_crps(members, y)
    np.testing.assert_allclose([c, s, p], ref, rtol=1e-9, atol=1e-9)
    assert c >= -1e-9


def test_crps_single_member_and_perfect():
    x = np.random.default_rng(0).standard_normal((1, 5))
    y = np.random.default_rng(1).standard_normal(5)
    c, _, p = crps_ensemble(x, y)
    np.testing.assert_array_equal(c, np.abs(x[0] - y))
    assert np.all(p == 0)
    c, s, p = crps_ensemble(np.repeat(y[None], 4, 0), y)
    assert np.all(c == 0) and np.all(s == 0) and np.all(p == 0)
    with pytest.raises(ValueError):
        crps_ensemble(np.zeros((0, 3)), np.zeros(3))


def test_weighted_mse_direct_sum_oracle():
    rng = np.random.default_rng(3)
    g = GridSpec(3, 4, -60.0, 60.0, 90.0)
    f, t = rng.standard_normal((2, 3, 4))
    w = latitude_weights(g)
    num = 0.0
    den = 0.0
    for i in range(3):
        for j in range(4):
            num += w[i] * (f[i, j] - t[i, j]) ** 2
            den += w[i]
    assert float(weighted_mse(f, t, w)) == pytest.approx(num / den, rel=0, abs=1e-12)


def test_rmse_identities_and_date_convention():
    rng = np.random.default_rng(4)
    w = latitude_weights(GridSpec.global_grid(6, 8))
    truth = rng.standard_normal((3, 5, 2, 6, 8))
    assert np.all(rmse(truth, truth, w) == 0)
    np.testing.assert_allclose(rmse(truth + 0.7, truth, w), 0.7, rtol=1e-12)
    fc = truth + rng.standard_normal(truth.shape)
    per_date = np.array([weighted_mse(fc[d], truth[d], w) for d in range(3)])
    np.testing.assert_allclose(rmse(fc, truth, w), np.sqrt(per_date.mean(0)), rtol=1e-12)


def test_metrics_invariant_to_longitude_roll_and_member_order():
    rng = np.random.default_rng(5)
    w = latitude_weights(GridSpec.global_grid(6, 8))
    ens, truth, clim = rng.standard_normal((5, 2, 6, 8)), rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 6, 8))
    r = lambda a: np.roll(a, 3, axis=-1)  # noqa: E731
    np.testing.assert_allclose(rmse(r(ens.mean(0)), r(truth), w), rmse(ens.mean(0), truth, w), rtol=1e-12)
    np.testing.assert_allclose(acc(r(ens[0]), r(truth), r(clim), w), acc(ens[0], truth, clim, w), rtol=1e-12)
    a = crps_fields(ens, truth, w)
    b = crps_fields(ens[::-1], truth, w)
    c = crps_fields(r(ens), r(truth), w)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a, c, rtol=1e-12)


def test_acc_cases():
    rng = np.random.default_rng(6)
    w = latitude_weights(GridSpec.global_grid(6, 8))
    truth, clim = rng.standard_normal((2, 3, 6, 8))
    np.testing.assert_allclose(acc(truth, truth, clim, w), 1.0, rtol=1e-12)
    np.testing.assert_allclose(acc(2 * clim - truth, truth, clim, w), -1.0, rtol=1e-12)
    assert np.all(np.isnan(acc(clim, truth, clim, w)))
    # multi-date: undefined dates are skipped, not counted as zero
    f = np.stack([clim, truth])[:, None]
    t = np.stack([truth, truth])[:, None]
    np.testing.assert_allclose(acc(f, t, np.stack([clim, clim])[:, None], w), 1.0)


def test_misaligned_inputs_rejected():
    g = GridSpec.global_grid(4, 8)
    a = FieldSequence(g, np.zeros((2, 1, 4, 8), np.float32), CalendarTime(1, 1, 0))
    b = FieldSequence(g, np.zeros((2, 1, 4, 8), np.float32), CalendarTime(1, 1, 6))
    with pytest.raises(ValueError):
        weighted_mse(a, b, latitude_weights(g))
    with pytest.raises(ValueError):
        weighted_mse(np.zeros((2, 4, 8)), np.zeros((3, 4, 8)), latitude_weights(g))


def _const_members(values, g):
    # one frame, one channel, every gridpoint equal to the member's value
    return np.array(values, dtype=np.float64)[:, None, None, None, None] * np.ones((1, 1, 1) + g.shape)


def test_event_probability_examples():
    g = GridSpec.global_grid(12, 24)
    box = ((40, 70), (20, 60))
    ens = _const_members([-25, -23, -21, -19, -10], g)
    assert event_probability(ens, *box, 0, 0, (-25, -19), grid=g) == pytest.approx(0.8)
    assert event_probability(ens, *box, 0, 0, (-100, 100), grid=g) == 1.0
    assert event_probability(ens, *box, 0, 0, (0, 1), grid=g) == 0.0
    with pytest.raises(ValueError):
        event_probability(ens, *box, 0, 1, (0, 1), grid=g)
