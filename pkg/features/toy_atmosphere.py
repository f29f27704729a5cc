"""Toy atmosphere: differential rotation + zonal hyperdiffusion on a lat-lon grid

Stands in for reanalysis data. Dynamics are exact (a Fourier phase shift per latitude row),
so the one-step map X_{t+dt} = F(X_t) is known and learnable.
"""
import logging
import math
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from core.data import Dataset, DatasetMeta
from core.errors import PersistenceError
from core.grid import GridSpec, cos_zenith
from core.schema import Channel, COS_ZENITH, toy_schema
from services.dataset_store import DEFAULT_SHARD_TIMES, write_meta, write_shard

logger = logging.getLogger(__name__)

GRAVITY = 9.80665
SCALE_HEIGHT_M = 7600.0


class ToyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_prog_channels: int = 8
    spectral_slope: float = 3.0
    omega0: Optional[List[float]] = None     # degrees longitude per step
    omega1: Optional[List[float]] = None     # degrees longitude per step, scaled by cos(lat)
    diffusion: float = 0.02
    dt_hours: float = 6.0
    seed: int = 1
    n_times: int = 512
    start_time: datetime = datetime(2018, 1, 1)
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    @field_validator("spectral_slope")
    @classmethod
    def _positive_slope(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("spectral_slope must be > 0")
        return value

    @field_validator("diffusion")
    @classmethod
    def _diffusion_range(cls, value: float) -> float:
        if not 0 <= value < 1:
            raise ValueError("diffusion must lie in [0, 1)")
        return value

    @model_validator(mode="after")
    def _check_lengths(self) -> "ToyConfig":
        if self.n_prog_channels < 1:
            raise ValueError("n_prog_channels must be >= 1")
        if self.n_times < 3:
            raise ValueError("n_times must be >= 3")
        for name in ("omega0", "omega1"):
            rates = getattr(self, name)
            if rates is not None and len(rates) != self.n_prog_channels:
                raise ValueError(f"{name} needs one rate per prognostic channel")
        if not (0 < self.train_fraction and 0 <= self.val_fraction
                and self.train_fraction + self.val_fraction <= 1):
            raise ValueError("split fractions must be positive and sum to at most 1")
        return self


def advect_step(field: np.ndarray, lat_deg: np.ndarray, omega0: float, omega1: float, nu: float) -> np.ndarray:
    """
    Rotate each latitude row eastward by omega0 + omega1 * cos(lat) degrees, then damp
    zonal wavenumber k by exp(-nu * k^2 / k_max^2).

    The shift is a Fourier phase shift, exact for non-integer shifts. For even row
    lengths the Nyquist coefficient is shifted through its real part only.

    Args:
        field: [..., n_lat, n_lon]
        lat_deg: latitude of each row
    """
    n_lon = field.shape[-1]
    spectrum = np.fft.rfft(field, axis=-1)
    k = np.arange(spectrum.shape[-1], dtype=np.float64)
    shift = np.deg2rad(omega0 + omega1 * np.cos(np.deg2rad(lat_deg)))
    phase = np.exp(-1j * k[None, :] * shift[:, None])
    if n_lon % 2 == 0:
        phase[:, -1] = np.cos(k[-1] * shift)
    k_max = max(n_lon // 2, 1)
    damping = np.exp(-nu * k ** 2 / k_max ** 2)
    out = np.fft.irfft(spectrum * phase * damping, n=n_lon, axis=-1)
    return out.astype(field.dtype, copy=False)


def random_phase_field(rng: np.random.Generator, grid: GridSpec, slope: float) -> np.ndarray:
    """
    Unit-variance Gaussian-like field whose per-row zonal power is exactly proportional
    to k^-slope. Latitude-dependent phases and a smooth envelope give meridional structure.
    """
    n_lon = grid.n_lon
    k = np.arange(1, (n_lon + 1) // 2)
    phi = np.deg2rad(grid.lat_centers)[:, None]
    amplitude = k.astype(np.float64) ** (-slope / 2.0)
    theta0 = rng.uniform(0.0, 2 * np.pi, k.size)
    wobble = rng.uniform(0.0, 0.5, k.size)
    mode = rng.integers(1, 4, k.size)
    psi = rng.uniform(0.0, 2 * np.pi, k.size)
    theta = theta0 + 2 * np.pi * wobble * np.sin(mode * phi + psi)
    envelope = 0.5 + np.cos(phi)
    coeffs = np.zeros((grid.n_lat, n_lon // 2 + 1), dtype=np.complex128)
    coeffs[:, k] = envelope * amplitude * np.exp(1j * theta) * (n_lon / 2.0)
    field = np.fft.irfft(coeffs, n=n_lon, axis=-1)
    b, c = rng.normal(0.0, 0.5, 2)
    field += (b * np.sin(phi) + c * np.cos(2 * phi)) * field.std()
    return field / field.std()


def physical_scale(channel: Channel) -> Tuple[float, float]:
    """(offset, scale) that puts a unit field into plausible field units"""
    if channel.level_hPa is not None:
        height = SCALE_HEIGHT_M * math.log(1000.0 / channel.level_hPa)
        if channel.name == "z":
            return GRAVITY * height, GRAVITY * 60.0
        if channel.name == "t":
            return max(210.0, 288.0 - 0.0065 * height), 6.0
        return 0.0, 1.0
    return {"t2m": (288.0, 12.0), "u10": (0.0, 5.0)}.get(channel.name, (0.0, 1.0))


def rotation_rates(cfg: ToyConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel (omega0, omega1); drawn from the seed when not configured"""
    omega0 = rng.uniform(2.0, 12.0, cfg.n_prog_channels)
    omega1 = rng.uniform(-6.0, 6.0, cfg.n_prog_channels)
    if cfg.omega0 is not None:
        omega0 = np.asarray(cfg.omega0, dtype=np.float64)
    if cfg.omega1 is not None:
        omega1 = np.asarray(cfg.omega1, dtype=np.float64)
    return omega0, omega1


def static_fields(rng: np.random.Generator, grid: GridSpec) -> Dict[str, np.ndarray]:
    """Seeded stand-ins for the land-sea mask and orography (km)"""
    land = random_phase_field(rng, grid, 4.0)
    mask = (land > 0.3).astype(np.float64)
    relief = random_phase_field(rng, grid, 2.5)
    orography = np.clip(relief, 0.0, None) * mask
    return {"land_sea_mask": mask, "orography": orography}


def split_ranges(cfg: ToyConfig) -> Dict[str, Tuple[int, int]]:
    n_train = int(round(cfg.n_times * cfg.train_fraction))
    n_val = int(round(cfg.n_times * cfg.val_fraction))
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, cfg.n_times),
    }


def generate_toy_dataset(
    cfg: ToyConfig,
    grid: GridSpec,
    path: Union[str, Path],
    shard_times: int = DEFAULT_SHARD_TIMES,
) -> Dataset:
    """
    Generate a toy dataset and write it to a dataset directory.

    Initial prognostic fields are random-phase fields with zonal power ~ k^-slope; each
    later time applies advect_step per channel. Static inputs (land-sea mask, orography,
    cosine of zenith angle) follow the prognostic channels.
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise PersistenceError(path, f"cannot create directory: {e}") from e

    field_seed, rate_seed, static_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    schema = toy_schema(cfg.n_prog_channels)
    field_rng = np.random.default_rng(field_seed)
    state = np.stack([
        random_phase_field(field_rng, grid, cfg.spectral_slope) for _ in range(cfg.n_prog_channels)
    ])
    omega0, omega1 = rotation_rates(cfg, np.random.default_rng(rate_seed))
    held = static_fields(np.random.default_rng(static_seed), grid)
    offsets, scales = np.array([physical_scale(c) for c in schema.prognostic]).T

    dt = timedelta(hours=cfg.dt_hours)
    times = [cfg.start_time + i * dt for i in range(cfg.n_times)]
    shards, arrays = [], []
    for index, start in enumerate(range(0, cfg.n_times, shard_times)):
        block = []
        for t in range(start, min(start + shard_times, cfg.n_times)):
            raw = state * scales[:, None, None] + offsets[:, None, None]
            statics = [
                cos_zenith(times[t], grid) if c.name == COS_ZENITH else held[c.name]
                for c in schema.static
            ]
            block.append(np.concatenate([raw, np.stack(statics)]).astype(np.float32))
            state = np.stack([
                advect_step(state[c], grid.lat_centers, omega0[c], omega1[c], cfg.diffusion)
                for c in range(cfg.n_prog_channels)
            ])
        values = np.stack(block)
        values.setflags(write=False)
        arrays.append(values)
        shards.append(write_shard(path, index, start, values))

    source = cfg.model_dump(mode="json")
    source.update(omega0=omega0.tolist(), omega1=omega1.tolist())
    meta = DatasetMeta(
        schema=schema,
        n_lat=grid.n_lat,
        n_lon=grid.n_lon,
        dt_hours=cfg.dt_hours,
        times=times,
        splits=split_ranges(cfg),
        shards=shards,
        source=source,
    )
    write_meta(path, meta)
    logger.info(
        "generated toy dataset %s: %d times, %d prognostic channels, grid %dx%d",
        path, cfg.n_times, cfg.n_prog_channels, grid.n_lat, grid.n_lon,
    )
    return Dataset(meta, arrays, path)
