import dataclasses

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from latentcast.grid import CalendarTime, FieldSequence, GridSpec, latitude_weights
from latentcast.metrics import weighted_mse
from latentcast.synthetic import (
    AnomalyEvent,
    AtmosphereParams,
    ClimatologyError,
    ClimatologyForecaster,
    ParameterError,
    build_climatology,
    climatology_forecast,
    generate,
    integrate_lorenz96,
    lorenz96_tendency,
    lorenz96_trajectory,
    split_years,
)

SMALL = dict(grid=GridSpec.global_grid(8, 16), n_years=2)
STEPS_PER_YEAR = 1464


def small(**kw):
    return AtmosphereParams(**{**SMALL, **kw})


def test_determinism():
    a, b = generate(small()), generate(small())
    assert a.values.tobytes() == b.values.tobytes()
    c = generate(small(seed=1))
    assert not np.array_equal(a.values, c.values)


def test_shape_and_static():
    seq = generate(small())
    assert seq.values.shape == (2 * STEPS_PER_YEAR, 5, 8, 16)
    assert seq.n_static == 1 and seq.n_dynamic == 4
    np.testing.assert_array_equal(seq.values[0, 4], seq.values[-1, 4])
    assert seq.values[:, 4].min() >= 0


def test_calendar_only_field_is_year_periodic():
    p = small(chaos_amp=(0,) * 4, noise_amp=(0,) * 4, wave_amp=(0,) * 4)
    v = generate(p).values
    np.testing.assert_array_equal(v[:STEPS_PER_YEAR], v[STEPS_PER_YEAR:])


def test_year_locked_waves_keep_periodicity():
    p = small(chaos_amp=(0,) * 4, noise_amp=(0,) * 4)
    v = generate(p).values.astype(np.float64)
    np.testing.assert_allclose(v[:STEPS_PER_YEAR], v[STEPS_PER_YEAR:], atol=1e-4)


def test_zonal_mean_separates_seasonal_cycle():
    full = generate(small())
    seasonal_only = generate(small(diurnal_amp=(0,) * 4, wave_amp=(0,) * 4, chaos_amp=(0,) * 4, noise_amp=(0,) * 4))
    p = small()
    resid = full.values[:, :4].mean(axis=-1) - seasonal_only.values[:, :4].mean(axis=-1)
    for c in range(4):
        bound = p.chaos_amp[c] ** 2 + p.noise_amp[c] ** 2
        assert resid[:, c].var() <= bound


def test_param_validation():
    with pytest.raises(ParameterError):
        small(seasonal_amp=(1, 1, 1))
    with pytest.raises(ParameterError):
        small(noise_amp=(-1, 0, 0, 0))
    with pytest.raises(ParameterError):
        small(seasonal_amp=(0, 1, 1, 1), diurnal_amp=(0, 1, 1, 1), wave_amp=(0, 1, 1, 1))
    with pytest.raises(ParameterError):
        small(lorenz_dt=0.007)


def test_l96_step_halving_and_reference():
    # the generator's internal dt passes the step-halving check at t=1
    dt = AtmosphereParams().lorenz_dt
    rng = np.random.default_rng(3)
    x0 = 8.0 + rng.standard_normal(40)
    coarse = integrate_lorenz96(x0, 1.0, dt, 8.0)
    fine = integrate_lorenz96(x0, 1.0, dt / 2, 8.0)
    assert np.sqrt(np.mean((coarse - fine) ** 2)) < 1e-6
    ref = solve_ivp(lambda t, x: lorenz96_tendency(x, 8.0), (0, 1), x0, method="DOP853", rtol=1e-12, atol=1e-12)
    assert np.sqrt(np.mean((coarse - ref.y[:, -1]) ** 2)) < 1e-6


def test_l96_bounded_at_default_forcing():
    p = AtmosphereParams(n_years=1)
    traj = lorenz96_trajectory(p)
    F = p.lorenz_forcing
    assert traj.min() >= -4 * F and traj.max() <= 4 * F
    assert traj.std() > 1  # still chaotic, not a fixed point


def test_l96_fixed_point():
    x = np.full(12, 8.0)
    np.testing.assert_allclose(integrate_lorenz96(x, 1.0, 0.01, 8.0), x, atol=1e-12)


def test_anomaly_injection():
    ev = AnomalyEvent(step=100, channel=0, lat_deg=56.0, lon_deg=37.0, radius_deg=15.0, amplitude=10.0)
    base, hot = generate(small()), generate(small(anomalies=(ev,)))
    diff = hot.values[:, 0] - base.values[:, 0]
    assert 5 < diff[100].max() <= 10.0 + 1e-4
    assert np.abs(diff[:50]).max() == 0
    np.testing.assert_array_equal(hot.values[:, 1:], base.values[:, 1:])


def _seq(values, start=CalendarTime(1, 1, 0), step=6):
    return FieldSequence(GridSpec.global_grid(values.shape[2], values.shape[3]), values, start, step)


def test_climatology_periodic_data():
    v = generate(small(chaos_amp=(0,) * 4, noise_amp=(0,) * 4, wave_amp=(0,) * 4)).values
    seq = FieldSequence(GridSpec.global_grid(8, 16), v, CalendarTime(1, 1, 0), 6, 1)
    table = build_climatology(seq, 0)
    np.testing.assert_array_equal(table.lookup(seq.slots()[:STEPS_PER_YEAR]), v[:STEPS_PER_YEAR])
    clim = climatology_forecast(build_climatology(seq, 0), CalendarTime(3, 1, 6), 40)
    i0 = (60 * 24 + 6) // 6
    w = latitude_weights(seq.grid)
    assert np.all(weighted_mse(clim.values, v[i0 : i0 + 40], w) == 0)


def test_climatology_constant():
    seq = _seq(np.full((STEPS_PER_YEAR, 1, 4, 8), 2.5, dtype=np.float32))
    np.testing.assert_allclose(build_climatology(seq, 7).means, 2.5, rtol=1e-7)


def test_climatology_two_year_direct_mean():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2 * STEPS_PER_YEAR, 1, 4, 8)).astype(np.float32)
    table = build_climatology(_seq(v), 0)
    # independent pass: frame t and t + one year share a slot
    for t in (0, 1, 237, 1463):
        expect = (v[t].astype(np.float64) + v[t + STEPS_PER_YEAR]) / 2
        np.testing.assert_allclose(table.lookup([t * 6])[0], expect, rtol=1e-6, atol=1e-7)


def test_climatology_needs_full_year_and_hours():
    with pytest.raises(ClimatologyError):
        build_climatology(_seq(np.zeros((100, 1, 4, 8), dtype=np.float32)))
    table = build_climatology(_seq(np.zeros((STEPS_PER_YEAR, 1, 4, 8), dtype=np.float32)))
    with pytest.raises(ClimatologyError):
        table.lookup([3])


def test_climatology_rmse_positive_with_chaos():
    seq = generate(small())
    train, test = split_years(seq, 1)
    model = ClimatologyForecaster(7).fit(train)
    pred = model.predict(test.start, 20)
    rm = np.sqrt(weighted_mse(pred.values[:, :4], test.values[:20, :4], latitude_weights(seq.grid)))
    assert np.all(rm > 0)


def test_split_years():
    seq = generate(small())
    a, b = split_years(seq, 1)
    assert a.n_steps == b.n_steps == STEPS_PER_YEAR
    assert b.start.index == 0


def test_params_are_frozen():
    p = AtmosphereParams()
    with pytest.raises(dataclasses.FrozenInstanceError):
        p.seed = 3
