"""Dataset directories: meta.json plus shard_NNNN.bin files

Layout (all little-endian):

    <dir>/meta.json        UTF-8 JSON (DatasetMeta), includes format_version
    <dir>/shard_0000.bin   float32 [count, C, H, W] row-major, then an 8-byte BLAKE2b checksum
    <dir>/shard_0001.bin   ...

Shard i covers time indices [start, start + count) as listed in meta.json.

Forecast directories use the same layout with a single shard whose leading axis is
lead time (dt, 2 dt, ...); their meta.json lists init_time, dt_hours and lead_hours.
"""
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config
from core.data import Dataset, DatasetMeta, Forecast, ShardInfo
from core.grid import make_grid
from core.schema import ChannelSchema
from core.errors import PersistenceError
from services.binary_io import (
    array_to_bytes,
    bytes_to_array,
    read_blob,
    read_json,
    write_blob,
    write_json,
)

logger = logging.getLogger(__name__)

DEFAULT_SHARD_TIMES = 256


def shard_name(index: int) -> str:
    return f"shard_{index:04d}.bin"


def write_shard(directory: Union[str, Path], index: int, start: int, values: np.ndarray) -> ShardInfo:
    """Write one [T, C, H, W] block of states"""
    directory = Path(directory)
    name = shard_name(index)
    write_blob(directory / name, array_to_bytes(values, "<f4"))
    return ShardInfo(file=name, start=start, count=int(values.shape[0]))


def write_meta(directory: Union[str, Path], meta: DatasetMeta) -> None:
    write_json(Path(directory) / config.META_FILE, meta.to_document())


def save_dataset(dataset: Dataset, path: Union[str, Path], shard_times: int = DEFAULT_SHARD_TIMES) -> DatasetMeta:
    """Write a dataset directory; returns the meta as written"""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PersistenceError(path, f"cannot create directory: {e}") from e
    shards: List[ShardInfo] = []
    for index, start in enumerate(range(0, dataset.n_times, shard_times)):
        stop = min(start + shard_times, dataset.n_times)
        shards.append(write_shard(path, index, start, dataset.window(start, stop)))
    meta = dataset.meta.model_copy(update={"shards": shards})
    write_meta(path, meta)
    logger.info("saved dataset %s: %d times in %d shards", path, dataset.n_times, len(shards))
    return meta


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Load and verify a dataset directory.

    Raises:
        NotFoundError: meta.json or a shard is missing
        VersionMismatchError: meta written by another format version
        TruncatedFileError: shard shorter or longer than declared
        ChecksumError: shard content does not match its checksum
    """
    path = Path(path)
    meta = DatasetMeta.from_document(read_json(path / config.META_FILE))
    per_time = (len(meta.schema.channels), meta.n_lat, meta.n_lon)
    shards = []
    for info in meta.shards:
        shape = (info.count,) + per_time
        payload = read_blob(path / info.file, int(np.prod(shape)) * 4)
        shards.append(bytes_to_array(payload, shape, "<f4"))
    return Dataset(meta, shards, path)


class ForecastMeta(BaseModel):
    """meta.json of a forecast directory; values live in shard_0000.bin as [n_steps, C, H, W]"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    format_version: int = config.FORMAT_VERSION
    kind: Literal["forecast"] = "forecast"
    init_time: datetime
    dt_hours: float
    lead_hours: List[float]
    schema_: ChannelSchema = Field(alias="schema")
    n_lat: int
    n_lon: int
    tag: str = ""
    shards: List[ShardInfo]


def save_forecast(forecast: Forecast, path: Union[str, Path]) -> None:
    """Write a forecast directory (same binary layout as a dataset, lead axis in meta)"""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PersistenceError(path, f"cannot create directory: {e}") from e
    shard = write_shard(path, 0, 0, forecast.values)
    meta = ForecastMeta(
        init_time=forecast.init_time,
        dt_hours=forecast.dt_hours,
        lead_hours=forecast.lead_hours,
        schema=forecast.schema,
        n_lat=forecast.grid.n_lat,
        n_lon=forecast.grid.n_lon,
        tag=forecast.tag,
        shards=[shard],
    )
    write_json(path / config.META_FILE, meta.model_dump(mode="json", by_alias=True))


def load_forecast(path: Union[str, Path]) -> Forecast:
    path = Path(path)
    meta = ForecastMeta.model_validate(read_json(path / config.META_FILE))
    info = meta.shards[0]
    shape = (info.count, len(meta.schema_.channels), meta.n_lat, meta.n_lon)
    payload = read_blob(path / info.file, int(np.prod(shape)) * 4)
    return Forecast(
        init_time=meta.init_time,
        dt_hours=meta.dt_hours,
        values=bytes_to_array(payload, shape, "<f4"),
        schema=meta.schema_,
        grid=make_grid(meta.n_lat, meta.n_lon),
        tag=meta.tag,
    )


class ForecastStore:
    """Forecasts indexed by init time; on disk one directory per init time"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self._cache: Dict[datetime, Forecast] = {}

    @staticmethod
    def entry_name(init_time: datetime) -> str:
        return init_time.strftime("%Y%m%dT%H%M%S")

    def put(self, forecast: Forecast) -> None:
        if self.path is not None:
            save_forecast(forecast, self.path / self.entry_name(forecast.init_time))
        self._cache[forecast.init_time] = forecast

    def get(self, init_time: datetime) -> Optional[Forecast]:
        if init_time in self._cache:
            return self._cache[init_time]
        if self.path is None:
            return None
        entry = self.path / self.entry_name(init_time)
        if not (entry / config.META_FILE).exists():
            return None
        forecast = load_forecast(entry)
        self._cache[init_time] = forecast
        return forecast

    def __contains__(self, init_time: datetime) -> bool:
        return self.get(init_time) is not None

    def init_times(self) -> List[datetime]:
        times = set(self._cache)
        if self.path is not None and self.path.exists():
            for entry in self.path.iterdir():
                if (entry / config.META_FILE).exists():
                    times.add(datetime.strptime(entry.name, "%Y%m%dT%H%M%S"))
        return sorted(times)

    def forecasts(self) -> List[Forecast]:
        return [self.get(t) for t in self.init_times()]
