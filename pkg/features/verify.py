"""Forecast verification: RMSE, ACC, zonal spectra and lagged-ensemble scores

All scores use latitude weights with mean 1, so a weighted spatial mean is
mean(w_lat[row] * field). Scores are averaged over init times as the mean of
per-forecast values.
"""
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from core.data import Dataset, Forecast
from core.errors import InvalidArgumentError, MissingInitError
from core.grid import GridSpec, latitude_weights

logger = logging.getLogger(__name__)

MIN_TRUTH_POWER = 1e-30


@dataclass
class MetricSeries:
    """One score per lead time; NaN marks a value reported as missing"""
    metric: str
    channel: str
    lead_hours: List[float]
    values: np.ndarray
    n_inits: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.lead_hours),):
            raise InvalidArgumentError("MetricSeries needs one value per lead")

    def at(self, lead_hours: float) -> float:
        try:
            return float(self.values[self.lead_hours.index(lead_hours)])
        except ValueError:
            raise InvalidArgumentError(f"{self.metric} has no lead {lead_hours}h") from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "channel": self.channel,
            "lead_hours": list(self.lead_hours),
            "values": [None if math.isnan(v) else float(v) for v in self.values],
            "n_inits": self.n_inits,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricSeries":
        values = [np.nan if v is None else v for v in data["values"]]
        return cls(data["metric"], data["channel"], list(data["lead_hours"]), np.array(values), data["n_inits"])


def weighted_mean(values: np.ndarray, w_lat: np.ndarray) -> float:
    """Latitude-weighted mean over the last two axes [..., H, W]"""
    return float(np.mean(values * w_lat[:, None]))


def rmse_field(pred: np.ndarray, truth: np.ndarray, w_lat: np.ndarray) -> float:
    diff = pred.astype(np.float64) - truth.astype(np.float64)
    return math.sqrt(weighted_mean(diff ** 2, w_lat))


def acc_field(pred: np.ndarray, truth: np.ndarray, climatology: np.ndarray, w_lat: np.ndarray) -> float:
    """Weighted anomaly correlation; 0 when the forecast anomaly vanishes"""
    a_f = pred.astype(np.float64) - climatology
    a_o = truth.astype(np.float64) - climatology
    w = w_lat[:, None]
    ff = float(np.sum(w * a_f * a_f))
    oo = float(np.sum(w * a_o * a_o))
    if ff == 0.0 or oo == 0.0:
        return 0.0
    return float(np.sum(w * a_f * a_o)) / math.sqrt(ff * oo)


def _as_list(forecasts: Union[Forecast, Sequence[Forecast]]) -> List[Forecast]:
    forecasts = [forecasts] if isinstance(forecasts, Forecast) else list(forecasts)
    if not forecasts:
        raise InvalidArgumentError("no forecasts to verify")
    leads = forecasts[0].lead_hours
    if any(f.lead_hours != leads for f in forecasts):
        raise InvalidArgumentError("forecasts must share one lead-time axis")
    return forecasts


def _check_grid(forecasts: List[Forecast], truth: Dataset, grid: GridSpec) -> None:
    if truth.grid.shape != grid.shape or any(f.grid.shape != grid.shape for f in forecasts):
        raise InvalidArgumentError("forecast, truth and verification grids differ")


def _per_lead(forecasts, truth: Dataset, grid: GridSpec, channel: str, score) -> np.ndarray:
    """[n_inits, n_leads] scores; AlignmentError when a valid time has no truth"""
    forecasts = _as_list(forecasts)
    _check_grid(forecasts, truth, grid)
    c = truth.schema.prognostic_index(channel)
    w_lat = latitude_weights(grid)
    table = np.empty((len(forecasts), forecasts[0].n_steps))
    for i, forecast in enumerate(forecasts):
        for k, valid_time in enumerate(forecast.valid_times):
            observed = truth.state_at(valid_time)[c]
            table[i, k] = score(forecast.values[k, c], observed, c, w_lat)
    return table


def lat_rmse(
    forecasts: Union[Forecast, Sequence[Forecast]],
    truth: Dataset,
    grid: GridSpec,
    channel: str,
) -> MetricSeries:
    """Latitude-weighted RMSE per lead, averaged over init times"""
    table = _per_lead(forecasts, truth, grid, channel, lambda f, o, c, w: rmse_field(f, o, w))
    leads = _as_list(forecasts)[0].lead_hours
    return MetricSeries("rmse", channel, leads, table.mean(axis=0), n_inits=table.shape[0])


def acc(
    forecasts: Union[Forecast, Sequence[Forecast]],
    truth: Dataset,
    climatology: np.ndarray,
    grid: GridSpec,
    channel: str,
) -> MetricSeries:
    """Latitude-weighted anomaly correlation per lead against a [C_p, H, W] climatology"""
    table = _per_lead(
        forecasts, truth, grid, channel, lambda f, o, c, w: acc_field(f, o, climatology[c], w)
    )
    leads = _as_list(forecasts)[0].lead_hours
    return MetricSeries("acc", channel, leads, table.mean(axis=0), n_inits=table.shape[0])


def ps1d(field: np.ndarray, grid: GridSpec) -> np.ndarray:
    """
    One-sided zonal power spectrum, k = 0 .. n_lon // 2, rows averaged with latitude weights.

    With X_k = rfft(row) / n_lon, power is 2|X_k|^2 for interior k and |X_k|^2 for k = 0
    and the Nyquist bin, so the sum over k > 0 equals the row variance.

    Args:
        field: [H, W] or [..., H, W]; leading axes are averaged
    """
    n_lon = field.shape[-1]
    coeffs = np.fft.rfft(np.asarray(field, dtype=np.float64), axis=-1) / n_lon
    power = 2.0 * np.abs(coeffs) ** 2
    power[..., 0] /= 2.0
    if n_lon % 2 == 0:
        power[..., -1] /= 2.0
    w_lat = latitude_weights(grid)
    rows = power * w_lat[:, None]
    return rows.reshape(-1, rows.shape[-2], rows.shape[-1]).mean(axis=(0, 1))


def mean_ps1d(
    forecasts: Union[Forecast, Sequence[Forecast]],
    truth: Dataset,
    grid: GridSpec,
    channel: str,
) -> Dict[str, np.ndarray]:
    """Spectra of predictions and matching truth averaged over all leads and init times"""
    forecasts = _as_list(forecasts)
    _check_grid(forecasts, truth, grid)
    c = truth.schema.prognostic_index(channel)
    preds, truths = [], []
    for forecast in forecasts:
        for k, valid_time in enumerate(forecast.valid_times):
            truths.append(ps1d(truth.state_at(valid_time)[c], grid))
            preds.append(ps1d(forecast.values[k, c], grid))
    return {"pred": np.mean(preds, axis=0), "truth": np.mean(truths, axis=0)}


def psd_ratio(pred_spectrum: np.ndarray, truth_spectrum: np.ndarray) -> np.ndarray:
    """Predicted over true power per wavenumber; NaN where the truth carries no power"""
    pred_spectrum = np.asarray(pred_spectrum, dtype=np.float64)
    truth_spectrum = np.asarray(truth_spectrum, dtype=np.float64)
    if pred_spectrum.shape != truth_spectrum.shape:
        raise InvalidArgumentError(
            f"spectra have different wavenumber axes: {pred_spectrum.shape} vs {truth_spectrum.shape}"
        )
    ratio = np.full(truth_spectrum.shape, np.nan)
    valid = truth_spectrum >= MIN_TRUTH_POWER
    ratio[valid] = pred_spectrum[valid] / truth_spectrum[valid]
    return ratio


def high_wavenumber_ratio(ratio: np.ndarray) -> float:
    """Mean ratio over the top quartile of wavenumbers, ignoring missing entries"""
    k_max = len(ratio) - 1
    top = ratio[int(math.ceil(0.75 * k_max)):]
    top = top[np.isfinite(top)]
    return float(top.mean()) if top.size else float("nan")


@dataclass
class LaggedEnsemble:
    """M states valid at one time from inits t0, t0 - dt, ..., t0 - (M - 1) dt"""
    valid_time: datetime
    members: np.ndarray            # [M, C, H, W] raw units
    init_times: List[datetime]
    member_lead_hours: List[float]
    center_lead_hours: float

    @property
    def n_members(self) -> int:
        return int(self.members.shape[0])


def build_lagged_ensemble(
    store,
    valid_time: datetime,
    n_members: int,
    dt: timedelta,
    newest_lead: Optional[timedelta] = None,
) -> LaggedEnsemble:
    """
    Collect M lagged members valid at valid_time from a forecast store.

    The newest member was initialized newest_lead before valid_time (default dt);
    each older member starts one dt earlier. The center lead is the newest lead
    plus (M - 1) / 2 lags.

    Args:
        store: anything with get(init_time) -> Optional[Forecast]

    Raises:
        MissingInitError: listing every init time that is absent or too short
    """
    if n_members < 1:
        raise InvalidArgumentError("n_members must be >= 1")
    newest_lead = newest_lead or dt
    members, inits, leads, missing = [], [], [], []
    for k in range(n_members):
        init_time = valid_time - newest_lead - dt * k
        forecast = store.get(init_time)
        index = forecast.lead_index(valid_time) if forecast is not None else None
        if index is None:
            missing.append(init_time)
            continue
        members.append(forecast.values[index])
        inits.append(init_time)
        leads.append(forecast.lead_hours[index])
    if missing:
        raise MissingInitError(missing)
    lag_hours = dt.total_seconds() / 3600.0
    return LaggedEnsemble(
        valid_time=valid_time,
        members=np.stack(members),
        init_times=inits,
        member_lead_hours=leads,
        center_lead_hours=newest_lead.total_seconds() / 3600.0 + (n_members - 1) / 2.0 * lag_hours,
    )


def crps_field(members: np.ndarray, truth: np.ndarray, fair: bool = False) -> np.ndarray:
    """
    Per-cell ensemble CRPS: mean|x_i - y| - sum_ij |x_i - x_j| / (2 M^2).

    The fair estimator divides the pair sum by 2 M (M - 1) instead. The pair sum uses
    sorted members: sum_ij |x_i - x_j| = 2 sum_i (2 i - M + 1) x_(i).
    """
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    m = members.shape[0]
    if fair and m < 2:
        raise InvalidArgumentError("the fair CRPS estimator needs at least 2 members")
    skill = np.abs(members - truth[None]).mean(axis=0)
    ranks = (2.0 * np.arange(m) - m + 1).reshape((m,) + (1,) * truth.ndim)
    pair_sum = 2.0 * np.sum(ranks * np.sort(members, axis=0), axis=0)
    return skill - pair_sum / (2.0 * m * (m - 1) if fair else 2.0 * m * m)


def ensemble_spread(members: np.ndarray, w_lat: np.ndarray) -> float:
    """sqrt of the weighted mean of per-cell sample variances (divisor M - 1)"""
    if members.shape[0] < 2:
        raise InvalidArgumentError("ensemble spread needs at least 2 members")
    variance = np.var(np.asarray(members, dtype=np.float64), axis=0, ddof=1)
    return math.sqrt(weighted_mean(variance, w_lat))


@dataclass
class EnsembleScores:
    ens_mean_rmse: float
    spread: float
    spread_skill: Optional[float]
    crps: float

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {
            "ens_mean_rmse": self.ens_mean_rmse,
            "spread": self.spread,
            "spread_skill": self.spread_skill,
            "crps": self.crps,
        }


def score_members(members: np.ndarray, truth: np.ndarray, w_lat: np.ndarray, fair: bool = False) -> EnsembleScores:
    """
    Scores of members [M, H, W] against truth [H, W].

    spread_skill is None when the ensemble-mean RMSE is 0.

    Raises:
        InvalidArgumentError: fewer than 2 members
    """
    spread = ensemble_spread(members, w_lat)
    rmse = rmse_field(members.astype(np.float64).mean(axis=0), truth, w_lat)
    spread_skill = spread / rmse if rmse > 0 else None
    crps = weighted_mean(crps_field(members, truth, fair), w_lat)
    return EnsembleScores(rmse, spread, spread_skill, crps)


def ensemble_scores(
    ensemble: LaggedEnsemble,
    truth: Dataset,
    grid: GridSpec,
    channel: str,
    fair: bool = False,
) -> EnsembleScores:
    c = truth.schema.prognostic_index(channel)
    observed = truth.state_at(ensemble.valid_time)[c]
    return score_members(ensemble.members[:, c], observed, latitude_weights(grid), fair)


def complete_inits(store, inits: Sequence[datetime], n_members: int, dt: timedelta) -> List[datetime]:
    """Inits whose n_members - 1 older lags all have a forecast in the store"""
    return [
        t for t in inits
        if all(store.get(t - dt * k) is not None for k in range(n_members))
    ]


def lagged_ensemble_scores(
    store,
    truth: Dataset,
    grid: GridSpec,
    channel: str,
    inits: Sequence[datetime],
    n_members: int,
    newest_leads: Sequence[timedelta],
    fair: bool = False,
) -> Dict[str, MetricSeries]:
    """
    Ensemble-mean RMSE, spread, spread-skill and CRPS against center lead time.

    For each newest-member lead L, scores are averaged over the ensembles valid at
    init + L for every newest-member init time. spread_skill is the ratio of the
    averaged spread and RMSE (NaN where the RMSE is 0). Inits with a lag missing
    from the store are dropped with a warning.

    Raises:
        InvalidArgumentError: no inits, no leads or fewer than 2 members
        MissingInitError: no init has all of its lags
    """
    if not inits or not newest_leads:
        raise InvalidArgumentError("lagged ensemble scores need at least one init and one lead")
    if n_members < 2:
        raise InvalidArgumentError("lagged ensemble scores need at least 2 members")
    dt = truth.dt
    usable = complete_inits(store, inits, n_members, dt)
    dropped = [t for t in inits if t not in usable]
    if not usable:
        raise MissingInitError(sorted({t - dt * k for t in dropped for k in range(n_members)
                                       if store.get(t - dt * k) is None}))
    if dropped:
        logger.warning("%s: %d of %d inits lack older lags and are not scored: %s", channel,
                       len(dropped), len(inits), ", ".join(t.isoformat() for t in dropped))
    centers, rows = [], []
    for lead in newest_leads:
        cases = []
        for init_time in usable:
            ensemble = build_lagged_ensemble(store, init_time + lead, n_members, dt, lead)
            cases.append(ensemble_scores(ensemble, truth, grid, channel, fair))
        centers.append(ensemble.center_lead_hours)
        rmse = float(np.mean([s.ens_mean_rmse for s in cases]))
        spread = float(np.mean([s.spread for s in cases]))
        rows.append({
            "ens_mean_rmse": rmse,
            "spread": spread,
            "spread_skill": spread / rmse if rmse > 0 else float("nan"),
            "crps": float(np.mean([s.crps for s in cases])),
        })
    return {
        metric: MetricSeries(metric, channel, centers, np.array([r[metric] for r in rows]), len(usable))
        for metric in ("ens_mean_rmse", "spread", "spread_skill", "crps")
    }
