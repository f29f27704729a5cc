import math
from datetime import timedelta

import numpy as np
import pytest

from core.data import Forecast, compute_climatology
from core.errors import AlignmentError, InvalidArgumentError, MissingInitError
from core.grid import latitude_weights, make_grid
from features.rollout import climatology_forecast, evaluation_inits, lagged_inits, persistence_forecast
from features.toy_atmosphere import advect_step
from features.verify import (
    MetricSeries,
    acc,
    acc_field,
    build_lagged_ensemble,
    crps_field,
    ensemble_spread,
    high_wavenumber_ratio,
    lagged_ensemble_scores,
    lat_rmse,
    mean_ps1d,
    ps1d,
    psd_ratio,
    rmse_field,
    score_members,
)


def _perfect(dataset, index, n_steps):
    """Forecast whose leads are the dataset's own future states"""
    values = dataset.window(index + 1, index + 1 + n_steps)
    return Forecast(dataset.times[index], dataset.meta.dt_hours, values, dataset.schema, dataset.grid, "truth")


@pytest.fixture(scope="module")
def persistence_store(toy_dataset):
    return {
        toy_dataset.times[i]: persistence_forecast(toy_dataset.state(i), 6, toy_dataset.dt)
        for i in range(30, 41)
    }


ORACLE_GRIDS = [(2, 4), (3, 7), (6, 10), (8, 16), (16, 32), (32, 64), (64, 128)]


@pytest.mark.parametrize("case", range(120))
def test_rmse_and_acc_match_loop_oracles(case):
    rng = np.random.default_rng(case)
    n_lat, n_lon = ORACLE_GRIDS[case % len(ORACLE_GRIDS)]
    grid = make_grid(n_lat, n_lon)
    w = latitude_weights(grid)
    scale = 10.0 ** rng.uniform(-3, 3)
    pred, truth, clim = (scale * rng.normal(size=grid.shape) for _ in range(3))
    total, num, ff, oo = 0.0, 0.0, 0.0, 0.0
    for y in range(grid.n_lat):
        for x in range(grid.n_lon):
            total += w[y] * (pred[y, x] - truth[y, x]) ** 2
            af, ao = pred[y, x] - clim[y, x], truth[y, x] - clim[y, x]
            num += w[y] * af * ao
            ff += w[y] * af * af
            oo += w[y] * ao * ao
    assert rmse_field(pred, truth, w) == pytest.approx(math.sqrt(total / pred.size), rel=1e-6)
    assert acc_field(pred, truth, clim, w) == pytest.approx(num / math.sqrt(ff * oo), rel=1e-6)
    assert acc_field(clim, truth, clim, w) == 0.0


def test_climatology_baseline_has_zero_acc(toy_dataset):
    climatology = compute_climatology(toy_dataset)
    forecasts = [
        climatology_forecast(climatology, toy_dataset.state(i), 4, toy_dataset.dt)
        for i in (36, 38, 40)
    ]
    for channel in (c.label for c in toy_dataset.schema.prognostic):
        series = acc(forecasts, toy_dataset, climatology, toy_dataset.grid, channel)
        np.testing.assert_array_equal(series.values, np.zeros(4))


def test_perfect_forecast_scores(toy_dataset):
    forecasts = [_perfect(toy_dataset, i, 4) for i in (36, 38)]
    rmse = lat_rmse(forecasts, toy_dataset, toy_dataset.grid, "z500")
    np.testing.assert_array_equal(rmse.values, np.zeros(4))
    assert rmse.lead_hours == [6.0, 12.0, 18.0, 24.0]
    assert rmse.n_inits == 2
    climatology = compute_climatology(toy_dataset)
    correlation = acc(forecasts, toy_dataset, climatology, toy_dataset.grid, "t2m")
    np.testing.assert_allclose(correlation.values, 1.0)


def test_scores_average_over_inits(toy_dataset):
    forecasts = [persistence_forecast(toy_dataset.state(i), 3, toy_dataset.dt) for i in (36, 40)]
    combined = lat_rmse(forecasts, toy_dataset, toy_dataset.grid, "u10").values
    separate = [lat_rmse(f, toy_dataset, toy_dataset.grid, "u10").values for f in forecasts]
    np.testing.assert_allclose(combined, np.mean(separate, axis=0))


def test_scoring_past_the_dataset_fails(toy_dataset):
    forecast = persistence_forecast(toy_dataset.state(46), 3, toy_dataset.dt)
    with pytest.raises(AlignmentError):
        lat_rmse(forecast, toy_dataset, toy_dataset.grid, "z500")
    with pytest.raises(InvalidArgumentError):
        lat_rmse([], toy_dataset, toy_dataset.grid, "z500")
    with pytest.raises(InvalidArgumentError):
        lat_rmse(_perfect(toy_dataset, 36, 2), toy_dataset, make_grid(8, 32), "z500")


def test_metric_series_lookup_and_missing_values():
    series = MetricSeries("rmse", "z500", [6.0, 12.0], [1.5, float("nan")])
    assert series.at(6.0) == 1.5
    assert series.to_dict()["values"] == [1.5, None]
    assert math.isnan(MetricSeries.from_dict(series.to_dict()).at(12.0))
    with pytest.raises(InvalidArgumentError):
        series.at(18.0)
    with pytest.raises(InvalidArgumentError):
        MetricSeries("rmse", "z500", [6.0], [1.0, 2.0])


@pytest.mark.parametrize("n_lon", [16, 15])
def test_ps1d_sums_to_weighted_row_variance(n_lon):
    grid = make_grid(6, n_lon)
    field = np.random.default_rng(n_lon).normal(size=grid.shape)
    spectrum = ps1d(field, grid)
    assert spectrum.shape == (n_lon // 2 + 1,)
    w = latitude_weights(grid)
    expected = np.mean(w * field.var(axis=1))
    assert spectrum[1:].sum() == pytest.approx(expected)
    assert spectrum[0] == pytest.approx(np.mean(w * field.mean(axis=1) ** 2))


def test_ps1d_of_a_single_wave():
    grid = make_grid(4, 32)
    lon = np.deg2rad(grid.lon_centers)
    field = np.tile(3.0 * np.cos(5 * lon), (4, 1))
    spectrum = ps1d(field, grid)
    assert spectrum[5] == pytest.approx(4.5)
    spectrum[5] = 0.0
    np.testing.assert_allclose(spectrum, 0.0, atol=1e-20)


def test_psd_ratio_and_high_wavenumber_mean():
    ratio = psd_ratio([1.0, 2.0, 3.0], [1.0, 0.0, 6.0])
    assert ratio[0] == 1.0
    assert math.isnan(ratio[1])
    assert ratio[2] == 0.5
    with pytest.raises(InvalidArgumentError):
        psd_ratio([1.0], [1.0, 2.0])
    values = np.array([9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 1.0, np.nan, 3.0])
    assert high_wavenumber_ratio(values) == pytest.approx(2.0)


def test_mean_ps1d_of_perfect_forecast(toy_dataset):
    spectra = mean_ps1d([_perfect(toy_dataset, 36, 3)], toy_dataset, toy_dataset.grid, "z500")
    np.testing.assert_allclose(spectra["pred"], spectra["truth"])


def test_crps_matches_pairwise_oracle():
    rng = np.random.default_rng(7)
    for m in range(1, 7):
        members = rng.normal(size=(m, 3, 4))
        truth = rng.normal(size=(3, 4))
        skill = np.abs(members - truth).mean(axis=0)
        pairs = np.zeros((3, 4))
        for i in range(m):
            for j in range(m):
                pairs += np.abs(members[i] - members[j])
        np.testing.assert_allclose(crps_field(members, truth), skill - pairs / (2 * m * m))
        if m > 1:
            np.testing.assert_allclose(crps_field(members, truth, fair=True), skill - pairs / (2 * m * (m - 1)))
    with pytest.raises(InvalidArgumentError):
        crps_field(np.zeros((1, 2, 2)), np.zeros((2, 2)), fair=True)


def test_single_member_crps_is_absolute_error():
    member, truth = np.array([[[1.0, -2.0]]]), np.array([[0.5, 0.5]])
    np.testing.assert_allclose(crps_field(member, truth), [[0.5, 2.5]])


def test_spread_and_member_scores():
    grid = make_grid(4, 8)
    w = latitude_weights(grid)
    members = np.stack([np.full(grid.shape, v) for v in (1.0, 2.0, 3.0)])
    truth = np.zeros(grid.shape)
    assert ensemble_spread(members, w) == pytest.approx(1.0)
    scores = score_members(members, truth, w)
    assert scores.ens_mean_rmse == pytest.approx(2.0)
    assert scores.spread_skill == pytest.approx(0.5)
    with pytest.raises(InvalidArgumentError):
        ensemble_spread(members[:1], w)
    with pytest.raises(InvalidArgumentError):
        score_members(members[:1], truth, w)


def test_perfect_ensemble_has_no_spread_skill():
    grid = make_grid(4, 8)
    truth = np.random.default_rng(3).normal(size=grid.shape)
    scores = score_members(np.stack([truth, truth]), truth, latitude_weights(grid))
    assert scores.ens_mean_rmse == 0.0
    assert scores.spread == 0.0
    assert scores.crps == 0.0
    assert scores.spread_skill is None


def test_exchangeable_gaussian_ensemble_spread_skill():
    rng = np.random.default_rng(11)
    grid = make_grid(512, 2048)
    members = rng.standard_normal((9,) + grid.shape, dtype=np.float32)
    truth = rng.standard_normal(grid.shape, dtype=np.float32)
    scores = score_members(members, truth, latitude_weights(grid))
    assert scores.spread_skill == pytest.approx(math.sqrt(9 / 10), abs=0.03)


def _brier_integral(members, truth, n_points=400_001):
    """CRPS as the integral of (F_ens(z) - 1[z >= y])^2 on a midpoint grid"""
    lo, hi = min(members.min(), truth) - 1.0, max(members.max(), truth) + 1.0
    edges = np.linspace(lo, hi, n_points)
    z = 0.5 * (edges[1:] + edges[:-1])
    cdf = (members[:, None] <= z[None, :]).mean(axis=0)
    step = (z >= truth).astype(np.float64)
    return float(np.sum((cdf - step) ** 2) * (edges[1] - edges[0]))


def test_crps_matches_brier_integral():
    assert crps_field(np.array([[[0.0]], [[2.0]]]), np.array([[1.0]]))[0, 0] == pytest.approx(0.5)
    rng = np.random.default_rng(21)
    for case in range(24):
        m = 1 + case % 8
        members = rng.normal(size=m)
        truth = float(rng.normal())
        score = crps_field(members.reshape(m, 1, 1), np.array([[truth]]))[0, 0]
        assert score == pytest.approx(_brier_integral(members, truth), abs=1e-3)


def test_ensemble_mean_beats_average_member():
    rng = np.random.default_rng(4)
    for case in range(30):
        grid = make_grid(*ORACLE_GRIDS[case % 5])
        w = latitude_weights(grid)
        m = 2 + case % 7
        truth = rng.normal(size=grid.shape)
        members = truth + rng.normal(loc=rng.normal(), size=(m,) + grid.shape)
        scores = score_members(members, truth, w)
        member_rmse = np.mean([rmse_field(x, truth, w) for x in members])
        assert scores.ens_mean_rmse <= member_rmse + 1e-12


def test_lagged_ensemble_collects_older_inits(toy_dataset, persistence_store):
    times, dt = toy_dataset.times, toy_dataset.dt
    ensemble = build_lagged_ensemble(persistence_store, times[40], 3, dt)
    assert ensemble.init_times == [times[39], times[38], times[37]]
    assert ensemble.member_lead_hours == [6.0, 12.0, 18.0]
    assert ensemble.center_lead_hours == 12.0
    n_prog = toy_dataset.schema.n_prognostic
    for member, index in zip(ensemble.members, (39, 38, 37)):
        np.testing.assert_array_equal(member[:n_prog], toy_dataset.values(index)[:n_prog])


def test_lagged_ensemble_lists_missing_inits(toy_dataset, persistence_store):
    times, dt = toy_dataset.times, toy_dataset.dt
    with pytest.raises(MissingInitError) as info:
        build_lagged_ensemble(persistence_store, times[31], 3, dt)
    assert info.value.missing == [times[29], times[28]]
    # the older member would need lead 42h from a 6-step forecast
    with pytest.raises(MissingInitError):
        build_lagged_ensemble(persistence_store, times[40], 2, dt, newest_lead=timedelta(hours=36))


def test_lagged_ensemble_scores_match_member_scores(toy_dataset, persistence_store):
    times, dt = toy_dataset.times, toy_dataset.dt
    series = lagged_ensemble_scores(persistence_store, toy_dataset, toy_dataset.grid, "z500",
                                    [times[40]], 3, [dt])
    c = toy_dataset.schema.prognostic_index("z500")
    members = np.stack([toy_dataset.values(i)[c] for i in (40, 39, 38)])
    expected = score_members(members, toy_dataset.values(41)[c], latitude_weights(toy_dataset.grid))
    assert series["ens_mean_rmse"].lead_hours == [12.0]
    assert series["crps"].n_inits == 1
    assert series["ens_mean_rmse"].values[0] == pytest.approx(expected.ens_mean_rmse)
    assert series["spread"].values[0] == pytest.approx(expected.spread)
    assert series["crps"].values[0] == pytest.approx(expected.crps)


def test_lagged_ensemble_scores_drop_inits_without_lags(toy_dataset, caplog):
    dt = toy_dataset.dt
    inits = evaluation_inits(toy_dataset, 3, 4, "train")
    assert inits[0] == toy_dataset.times[0]
    store = {
        t: persistence_forecast(toy_dataset.state(toy_dataset.index_of(t)), 4, dt)
        for t in lagged_inits(inits, 2, dt)
        if t >= toy_dataset.times[0]
    }
    with caplog.at_level("WARNING"):
        series = lagged_ensemble_scores(store, toy_dataset, toy_dataset.grid, "t2m", inits, 2, [dt])
    assert series["crps"].n_inits == len(inits) - 1
    assert np.all(np.isfinite(series["ens_mean_rmse"].values))
    assert "lack older lags" in caplog.text
    with pytest.raises(MissingInitError) as info:
        lagged_ensemble_scores(store, toy_dataset, toy_dataset.grid, "t2m", inits[:1], 2, [dt])
    assert info.value.missing == [inits[0] - dt]


def test_lagged_ensemble_scores_reject_empty_inputs(toy_dataset, persistence_store):
    dt = toy_dataset.dt
    with pytest.raises(InvalidArgumentError):
        lagged_ensemble_scores(persistence_store, toy_dataset, toy_dataset.grid, "t2m", [], 3, [dt])
    with pytest.raises(InvalidArgumentError):
        lagged_ensemble_scores(persistence_store, toy_dataset, toy_dataset.grid, "t2m",
                               [toy_dataset.times[40]], 3, [])
    with pytest.raises(InvalidArgumentError):
        lagged_ensemble_scores(persistence_store, toy_dataset, toy_dataset.grid, "t2m",
                               [toy_dataset.times[40]], 1, [dt])


def test_low_pass_prediction_loses_high_wavenumber_power(toy_dataset):
    grid = toy_dataset.grid
    c = toy_dataset.schema.prognostic_index("z500")
    truth = toy_dataset.values(40)[c].astype(np.float64)
    blurred = advect_step(truth, grid.lat_centers, 0.0, 0.0, 2.0)
    ratio = psd_ratio(ps1d(blurred, grid), ps1d(truth, grid))
    k_top = int(math.ceil(0.75 * (len(ratio) - 1)))
    assert np.all(ratio[k_top:-1] < 1.0)
    assert ratio[0] == pytest.approx(1.0)
    assert high_wavenumber_ratio(ratio) < 1.0
