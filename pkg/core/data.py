"""Dataset metadata, state tensors, normalization statistics and training samples"""
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import config
from core.errors import (
    AlignmentError,
    BoundsError,
    DegenerateChannelError,
    InvalidArgumentError,
)
from core.grid import GridSpec, cos_zenith, make_grid
from core.schema import COS_ZENITH, ChannelSchema, NormStats

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ShardInfo(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file: str
    start: int
    count: int


class DatasetMeta(BaseModel):
    """Everything in meta.json: schema, grid, time axis, splits, statistics, shard list"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    format_version: int = config.FORMAT_VERSION
    schema_: ChannelSchema = Field(alias="schema")
    n_lat: int
    n_lon: int
    dt_hours: float
    times: List[datetime]
    splits: Dict[str, Tuple[int, int]]
    stats: Optional[Dict[str, List[float]]] = None
    shards: List[ShardInfo] = []
    source: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def _check_axes(self) -> "DatasetMeta":
        step = timedelta(hours=self.dt_hours)
        for earlier, later in zip(self.times, self.times[1:]):
            if later - earlier != step:
                raise ValueError("times must be strictly increasing with uniform spacing dt")
        ranges = sorted(self.splits.values())
        for (a_start, a_stop), (b_start, _) in zip(ranges, ranges[1:]):
            if a_stop > b_start:
                raise ValueError("splits must be disjoint")
        for name, (start, stop) in self.splits.items():
            if not 0 <= start <= stop <= len(self.times):
                raise ValueError(f"split '{name}' [{start}, {stop}) outside the time axis")
        return self

    @property
    def schema(self) -> ChannelSchema:
        return self.schema_

    @property
    def grid(self) -> GridSpec:
        return make_grid(self.n_lat, self.n_lon)

    @property
    def norm_stats(self) -> Optional[NormStats]:
        return NormStats.from_dict(self.stats) if self.stats else None

    def to_document(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "DatasetMeta":
        return cls.model_validate(document)


@dataclass(frozen=True)
class StateTensor:
    """One atmospheric snapshot: [C, n_lat, n_lon] float32 with its valid time"""
    values: np.ndarray
    valid_time: datetime
    schema: ChannelSchema
    grid: GridSpec

    def __post_init__(self):
        expected = (len(self.schema.channels), self.grid.n_lat, self.grid.n_lon)
        if self.values.shape != expected:
            raise InvalidArgumentError(f"state shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError(f"state at {self.valid_time.isoformat()} is not finite")

    @property
    def prognostic(self) -> np.ndarray:
        return self.values[: self.schema.n_prognostic]

    @property
    def statics(self) -> np.ndarray:
        return self.values[self.schema.n_prognostic:]


@dataclass(frozen=True)
class Forecast:
    """
    Autoregressive trajectory from one initial state.

    values[k] is the raw-unit state (prognostic channels, then statics) valid at
    init_time + (k + 1) * dt.
    """
    init_time: datetime
    dt_hours: float
    values: np.ndarray
    schema: ChannelSchema
    grid: GridSpec
    tag: str = ""

    def __post_init__(self):
        expected = (len(self.schema.channels), self.grid.n_lat, self.grid.n_lon)
        if self.values.ndim != 4 or self.values.shape[1:] != expected:
            raise InvalidArgumentError(f"forecast shape {self.values.shape} != [n_steps, {expected}]")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError(f"forecast from {self.init_time.isoformat()} is not finite")

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[0])

    @property
    def dt(self) -> timedelta:
        return timedelta(hours=self.dt_hours)

    @property
    def lead_hours(self) -> List[float]:
        return [self.dt_hours * (k + 1) for k in range(self.n_steps)]

    @property
    def valid_times(self) -> List[datetime]:
        return [self.init_time + self.dt * (k + 1) for k in range(self.n_steps)]

    @property
    def prognostic(self) -> np.ndarray:
        return self.values[:, : self.schema.n_prognostic]

    @property
    def states(self) -> List[StateTensor]:
        return [
            StateTensor(self.values[k], time, self.schema, self.grid)
            for k, time in enumerate(self.valid_times)
        ]

    def lead_index(self, valid_time: datetime) -> Optional[int]:
        """Index into values for a valid time, or None when the forecast does not reach it"""
        offset = (valid_time - self.init_time) / self.dt
        k = int(round(offset)) - 1
        if k + 1 != offset or not 0 <= k < self.n_steps:
            return None
        return k


class Dataset:
    """Immutable, loaded dataset: meta plus shard arrays [T, C, H, W]"""

    def __init__(self, meta: DatasetMeta, shards: List[np.ndarray], path: Optional[Path] = None):
        self.meta = meta
        self.path = path
        self._shards = shards
        self._shard_starts = [info.start for info in meta.shards]
        self.grid = meta.grid
        self.schema = meta.schema
        self.times = list(meta.times)
        total = sum(s.shape[0] for s in shards)
        if total != len(self.times):
            raise InvalidArgumentError(f"shards hold {total} times, meta lists {len(self.times)}")

    @property
    def stats(self) -> Optional[NormStats]:
        return self.meta.norm_stats

    @property
    def dt(self) -> timedelta:
        return timedelta(hours=self.meta.dt_hours)

    @property
    def n_times(self) -> int:
        return len(self.times)

    def values(self, index: int) -> np.ndarray:
        """Raw state [C, H, W] at a time index"""
        if not 0 <= index < self.n_times:
            raise BoundsError(f"time index {index} outside [0, {self.n_times})")
        shard = int(np.searchsorted(self._shard_starts, index, side="right")) - 1
        return self._shards[shard][index - self._shard_starts[shard]]

    def window(self, start: int, stop: int) -> np.ndarray:
        """Raw states [stop - start, C, H, W]"""
        return np.stack([self.values(i) for i in range(start, stop)])

    def index_of(self, time: datetime) -> int:
        offset = (time - self.times[0]) / self.dt
        index = int(round(offset))
        if index != offset or not 0 <= index < self.n_times or self.times[index] != time:
            raise AlignmentError(time)
        return index

    def state_at(self, time: datetime) -> np.ndarray:
        """Raw state [C, H, W] at a valid time; AlignmentError when absent"""
        return self.values(self.index_of(time))

    def state(self, index: int) -> StateTensor:
        return StateTensor(self.values(index), self.times[index], self.schema, self.grid)

    def split_range(self, split: str) -> Tuple[int, int]:
        if split not in self.meta.splits:
            raise InvalidArgumentError(f"unknown split '{split}'")
        start, stop = self.meta.splits[split]
        return int(start), int(stop)

    def with_stats(self, stats: NormStats) -> "Dataset":
        meta = self.meta.model_copy(update={"stats": stats.to_dict()})
        return Dataset(meta, self._shards, self.path)


def _fsum_channels(partials: List[np.ndarray]) -> np.ndarray:
    """Compensated sum over per-time partial sums, channel by channel"""
    stacked = np.stack(partials)
    return np.array([math.fsum(stacked[:, c]) for c in range(stacked.shape[1])])


def _two_pass_moments(dataset: Dataset, indices: range, n_channels: int, diff: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and population std per channel over fields (or consecutive differences)"""

    def field(i: int) -> np.ndarray:
        x = dataset.values(i)[:n_channels].astype(np.float64)
        if diff:
            x = dataset.values(i + 1)[:n_channels].astype(np.float64) - x
        return x

    count = len(indices) * dataset.grid.n_lat * dataset.grid.n_lon
    mean = _fsum_channels([field(i).sum(axis=(1, 2)) for i in indices]) / count
    squares = _fsum_channels(
        [((field(i) - mean[:, None, None]) ** 2).sum(axis=(1, 2)) for i in indices]
    )
    return mean, np.sqrt(squares / count)


def _is_degenerate(std: float, mean: float) -> bool:
    return not std > 1e-12 * max(1.0, abs(mean))


def compute_norm_stats(dataset: Dataset, split: str = "train") -> NormStats:
    """
    Per-channel mean/std and temporal-difference std over one split (train by default).

    Accumulation is float64, two-pass, with compensated summation across times so the
    result does not depend on how the work is chunked.
    """
    start, stop = dataset.split_range(split)
    if stop - start < 2:
        raise InvalidArgumentError(f"split '{split}' needs at least two consecutive times")
    n_channels = dataset.schema.n_prognostic
    labels = dataset.schema.labels
    mean, std = _two_pass_moments(dataset, range(start, stop), n_channels, diff=False)
    diff_mean, diff_std = _two_pass_moments(dataset, range(start, stop - 1), n_channels, diff=True)
    for c in range(n_channels):
        if _is_degenerate(std[c], mean[c]):
            raise DegenerateChannelError(labels[c], "std")
        if _is_degenerate(diff_std[c], diff_mean[c]):
            raise DegenerateChannelError(labels[c], "temporal-difference std")
    logger.info("norm stats over %s split: %d times, %d channels", split, stop - start, n_channels)
    return NormStats(mean=mean, std=std, diff_std=diff_std)


def compute_climatology(dataset: Dataset, split: str = "train") -> np.ndarray:
    """Per-channel, per-cell time mean of prognostic channels, float64 [C_p, H, W]"""
    start, stop = dataset.split_range(split)
    if stop <= start:
        raise InvalidArgumentError(f"split '{split}' is empty")
    n_channels = dataset.schema.n_prognostic
    total = np.zeros((n_channels,) + dataset.grid.shape, dtype=np.float64)
    for i in range(start, stop):
        total += dataset.values(i)[:n_channels]
    return total / (stop - start)


def assemble_statics(schema: ChannelSchema, grid: GridSpec, held: np.ndarray, time: datetime) -> np.ndarray:
    """
    Static input channels at a valid time.

    Args:
        held: static channels [C_s, H, W] taken from some state; held constant
        time: valid time used to recompute the cosine of the zenith angle

    Returns:
        float32 [C_s, H, W]
    """
    out = np.array(held, dtype=np.float32, copy=True)
    for i, channel in enumerate(schema.static):
        if channel.name == COS_ZENITH:
            out[i] = cos_zenith(time, grid)
    return out


@dataclass
class Sample:
    """One unrolled training example, prognostic channels normalized"""
    inputs: np.ndarray    # [C_in, H, W] = normalized X_t + statics at t
    targets: np.ndarray   # [n_steps, C_p, H, W] normalized X_{t+k}
    statics: np.ndarray   # [n_steps + 1, C_s, H, W] statics at t, t+dt, ...
    times: List[datetime]


def n_samples(dataset: Dataset, split: str, n_steps: int) -> int:
    """Number of valid starting indices for n_steps-long sequences within a split"""
    start, stop = dataset.split_range(split)
    return max(0, stop - start - n_steps)


def sample_sequence(
    dataset: Dataset,
    index: int,
    n_steps: int,
    split: str = "train",
    stats: Optional[NormStats] = None,
) -> Sample:
    """
    X_t and its n_steps successors, normalized, with per-time static inputs.

    Args:
        index: start position relative to the beginning of the split
        n_steps: number of targets
        stats: normalization statistics; defaults to the dataset's own
    """
    if n_steps < 1:
        raise InvalidArgumentError("n_steps must be >= 1")
    stats = stats or dataset.stats
    if stats is None:
        raise InvalidArgumentError("dataset has no normalization statistics")
    start, stop = dataset.split_range(split)
    if index < 0 or start + index + n_steps >= stop:
        raise BoundsError(
            f"index {index} with {n_steps} steps outside split '{split}' of length {stop - start}"
        )
    first = start + index
    raw = dataset.window(first, first + n_steps + 1)
    n_prog = dataset.schema.n_prognostic
    prognostic = stats.normalize(raw[:, :n_prog])
    times = dataset.times[first:first + n_steps + 1]
    statics = np.stack([
        assemble_statics(dataset.schema, dataset.grid, raw[k, n_prog:], times[k])
        for k in range(n_steps + 1)
    ]) if dataset.schema.n_static else np.zeros((n_steps + 1, 0) + dataset.grid.shape, np.float32)
    inputs = np.concatenate([prognostic[0], statics[0]], axis=0)
    return Sample(inputs=inputs, targets=prognostic[1:], statics=statics, times=times)
