import numpy as np
import pytest

from latentcast.codec import PatchCodec
from latentcast.dit import DitConfig
from latentcast.evaluation import (
    METRICS,
    EvaluationError,
    choose_init_steps,
    climatological_base_rate,
    evaluate,
    read_metric_table,
    write_report,
)
from latentcast.forecaster import LatentFlowForecaster, RolloutConfig, TrainConfig
from latentcast.grid import GridSpec, box_mean, latitude_weights
from latentcast.metrics import weighted_mse
from latentcast.synthetic import AtmosphereParams, build_climatology, climatology_forecast, generate, split_years

DIT = DitConfig(d_model=16, n_heads=2, n_blocks=1, lora_rank=1, timestamp_embed_dim=8, time_freq_dim=16)


@pytest.fixture(scope="module")
def setup():
    seq = generate(AtmosphereParams(grid=GridSpec.global_grid(8, 16), n_years=2))
    train, test = split_years(seq, 1)
    codec = PatchCodec(4, 4, 16, steps=50).fit(train)
    f = LatentFlowForecaster(
        DIT, TrainConfig(steps=10, batch_size=2, horizon_days_max=2), RolloutConfig(sampler_steps=2)
    ).fit(codec.transform(train))
    clim = build_climatology(train, 3)
    report = evaluate(f, codec, test, clim, n_init_dates=2, horizon_days=2, n_members=3, seed=5)
    return train, test, codec, f, clim, report


def test_init_steps_leave_room():
    steps = choose_init_steps(100, 4, 8, 5)
    assert steps[0] == 3 and steps[-1] == 100 - 1 - 8
    with pytest.raises(EvaluationError):
        choose_init_steps(10, 4, 8, 2)


def test_report_shapes_and_row_counts(setup, tmp_path):
    *_, report = setup
    assert set(report.metrics) == set(METRICS)
    for s in report.metrics.values():
        assert s.values.shape == (8, 4)
        assert s.n_init_dates == 2
    paths = write_report(report, tmp_path)
    rows = read_metric_table(paths["table"])
    assert len(rows) == 8 * 4 * len(METRICS)
    assert {r["metric"] for r in rows} == set(METRICS)
    assert (tmp_path / "columns" / "rmse.tsv").read_text().count("\n") == 9


def test_climatology_baseline_is_direct(setup):
    train, test, codec, f, clim, report = setup
    w = latitude_weights(test.grid)
    mse = []
    for i0 in report.init_steps:
        c = climatology_forecast(clim, test.time_at(i0 + 1), 8).values[:, :4]
        mse.append(weighted_mse(c, test.values[i0 + 1 : i0 + 9, :4], w))
    np.testing.assert_allclose(report.metrics["climatology_rmse"].values, np.sqrt(np.mean(mse, 0)), rtol=1e-10)


def test_crps_identity_on_report(setup):
    *_, report = setup
    m = report.metrics
    np.testing.assert_allclose(m["crps"].values, m["crps_skill"].values - m["crps_spread"].values / 2, atol=1e-9)


def test_evaluation_reproducible(setup):
    train, test, codec, f, clim, report = setup
    again = evaluate(f, codec, test, clim, n_init_dates=2, horizon_days=2, n_members=3, seed=5)
    np.testing.assert_array_equal(again.metrics["crps"].values, report.metrics["crps"].values)


def test_too_short_data_rejected(setup):
    train, test, codec, f, clim, _ = setup
    with pytest.raises(EvaluationError):
        evaluate(f, codec, test.slice(0, 10), clim, n_init_dates=1, horizon_days=2, n_members=1)


def test_base_rate_counts_matching_frames(setup):
    train, *_ = setup
    box = ((30, 60), (0, 90))
    target = 40 * 24 + 12
    # direct count over frames at the same hour within 2 days
    idx = [t for t in range(train.n_steps) if train.slots()[t] % 24 == 12 and abs(train.slots()[t] // 24 - 40) <= 2]
    means = np.array([box_mean(train, t, 0, *box) for t in idx])
    lo = float(np.median(means))
    rate = climatological_base_rate(train, target, *box, 0, (lo, np.inf), window_days=2)
    assert len(idx) == 5
    assert rate == pytest.approx(np.mean(means >= lo))
