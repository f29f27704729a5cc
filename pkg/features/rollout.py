"""Autoregressive rollouts and reference baseline forecasts"""
import logging
from datetime import datetime, timedelta
from typing import List, Optional, Sequence

import numpy as np
import torch

from core.data import Dataset, Forecast, StateTensor, assemble_statics
from core.errors import InvalidArgumentError, NumericFailureError
from core.model import ForecastNet
from core.schema import NormStats

logger = logging.getLogger(__name__)


def _check_init(model: ForecastNet, init: StateTensor) -> None:
    if init.grid.shape != model.grid.shape:
        raise InvalidArgumentError(f"init grid {init.grid.shape} != model grid {model.grid.shape}")
    if len(init.schema.channels) != model.cfg.in_channels or init.schema.n_prognostic != model.cfg.out_channels:
        raise InvalidArgumentError("init schema does not match the model's channel layout")


def _statics_series(init: StateTensor, times: Sequence[datetime]) -> List[np.ndarray]:
    return [assemble_statics(init.schema, init.grid, init.statics, t) for t in times]


def rollout(
    model: ForecastNet,
    init: StateTensor,
    n_steps: int,
    stats: NormStats,
    dt: timedelta,
    tag: str = "model",
) -> Forecast:
    """
    Iterate the model from a raw-unit initial state.

    The carried state stays in raw units: residual mode adds sigma_dX * output to it,
    direct mode replaces it with mu + sigma * output. Each step sees the normalized
    state plus statics at its own valid time; drop-path is off (eval mode).

    Raises:
        NumericFailureError: with the index of the failing step
    """
    if n_steps < 1:
        raise InvalidArgumentError("n_steps must be >= 1")
    _check_init(model, init)
    model.eval()
    assert not model.training
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    n_prog = init.schema.n_prognostic
    times = [init.valid_time + dt * k for k in range(n_steps + 1)]
    statics = _statics_series(init, times)
    mean, std, diff_std = (v[:, None, None] for v in (stats.mean, stats.std, stats.diff_std))

    state = np.asarray(init.prognostic, dtype=np.float32)
    values = np.empty((n_steps, len(init.schema.channels)) + init.grid.shape, dtype=np.float32)
    with torch.no_grad():
        for step in range(n_steps):
            x_in = np.concatenate([stats.normalize(state.astype(np.float64)), statics[step]])
            x_in = torch.as_tensor(x_in, dtype=dtype, device=device)[None]
            try:
                output = model(x_in)[0].double().cpu().numpy()
            except NumericFailureError as e:
                raise e.with_context(step=step) from e
            if model.cfg.prediction_mode == "residual":
                nxt = state.astype(np.float64) + diff_std * output
            else:
                nxt = mean + std * output
            if not np.all(np.isfinite(nxt)):
                raise NumericFailureError("non-finite forecast state", step=step)
            state = nxt.astype(np.float32)
            values[step, :n_prog] = state
            values[step, n_prog:] = statics[step + 1]
    return Forecast(init.valid_time, dt.total_seconds() / 3600.0, values, init.schema, init.grid, tag)


def persistence_forecast(init: StateTensor, n_steps: int, dt: timedelta) -> Forecast:
    """Every lead repeats the initial prognostic state; cos_zenith still follows the valid time"""
    n_prog = init.schema.n_prognostic
    times = [init.valid_time + dt * k for k in range(1, n_steps + 1)]
    values = np.empty((n_steps, len(init.schema.channels)) + init.grid.shape, dtype=np.float32)
    values[:, :n_prog] = init.prognostic
    for k, statics in enumerate(_statics_series(init, times)):
        values[k, n_prog:] = statics
    return Forecast(init.valid_time, dt.total_seconds() / 3600.0, values, init.schema, init.grid, "persistence")


def climatology_forecast(climatology: np.ndarray, init: StateTensor, n_steps: int, dt: timedelta) -> Forecast:
    """
    Every lead is the train-split climatology, held in float64 so its anomaly is exactly 0.

    Args:
        climatology: [C_p, H, W] per-cell time mean
        init: supplies the init time, schema, grid and held static fields
    """
    n_prog = init.schema.n_prognostic
    if climatology.shape != (n_prog,) + init.grid.shape:
        raise InvalidArgumentError(f"climatology shape {climatology.shape} does not match the init state")
    times = [init.valid_time + dt * k for k in range(1, n_steps + 1)]
    values = np.empty((n_steps, len(init.schema.channels)) + init.grid.shape, dtype=np.float64)
    values[:, :n_prog] = climatology
    for k, statics in enumerate(_statics_series(init, times)):
        values[k, n_prog:] = statics
    return Forecast(init.valid_time, dt.total_seconds() / 3600.0, values, init.schema, init.grid, "climatology")


def evaluation_inits(dataset: Dataset, n_inits: int, n_steps: int, split: str = "test") -> List[datetime]:
    """
    n_inits evenly spaced init times in a split whose forecasts stay inside the dataset.

    Raises:
        InvalidArgumentError: when the split cannot hold one init plus n_steps leads
    """
    start, stop = dataset.split_range(split)
    last = min(stop, dataset.n_times) - 1 - n_steps
    if last < start or n_inits < 1:
        raise InvalidArgumentError(
            f"split '{split}' [{start}, {stop}) cannot hold {n_inits} inits with {n_steps} leads"
        )
    indices = np.linspace(start, last, n_inits).round().astype(int)
    return [dataset.times[i] for i in sorted(set(indices.tolist()))]


def lagged_inits(inits: Sequence[datetime], n_members: int, dt: timedelta) -> List[datetime]:
    """Init times plus the older lags a lagged ensemble around each of them needs"""
    times = {t - dt * k for t in inits for k in range(n_members)}
    return sorted(times)


def rollout_many(
    model: ForecastNet,
    dataset: Dataset,
    inits: Sequence[datetime],
    n_steps: int,
    stats: Optional[NormStats] = None,
    tag: str = "model",
) -> List[Forecast]:
    stats = stats or dataset.stats
    if stats is None:
        raise InvalidArgumentError("dataset has no normalization statistics")
    forecasts = []
    for init_time in inits:
        init = dataset.state(dataset.index_of(init_time))
        forecasts.append(rollout(model, init, n_steps, stats, dataset.dt, tag))
    logger.info("rolled out %d forecasts x %d steps (%s)", len(forecasts), n_steps, tag)
    return forecasts
