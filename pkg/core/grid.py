"""Equiangular lat-lon grid geometry, latitude weights and solar geometry"""
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, Any

import numpy as np

from core.errors import InvalidArgumentError

# Solar declination amplitude (degrees) and calendar constants
OBLIQUITY_DEG = 23.44
DAYS_PER_YEAR = 365.25
SOLSTICE_OFFSET_DAYS = 10.0


@dataclass(frozen=True)
class GridSpec:
    """Cell-centered equiangular grid; latitudes descend from north to south"""
    n_lat: int
    n_lon: int
    lat_centers: np.ndarray = field(repr=False, compare=False)
    lon_centers: np.ndarray = field(repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return (self.n_lat, self.n_lon)

    @property
    def dlat(self) -> float:
        return 180.0 / self.n_lat

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    def check_divisible(self, patch_size: int) -> None:
        if self.n_lat % patch_size or self.n_lon % patch_size:
            raise InvalidArgumentError(
                f"grid {self.n_lat}x{self.n_lon} is not divisible by patch size {patch_size}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {"n_lat": self.n_lat, "n_lon": self.n_lon}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        return make_grid(int(data["n_lat"]), int(data["n_lon"]))


def make_grid(n_lat: int, n_lon: int) -> GridSpec:
    """
    Build a cell-centered grid with no pole rows.

    Args:
        n_lat: number of latitude rows; the first center sits at 90 - dlat/2
        n_lon: number of longitude columns; lon_j = j * 360 / n_lon

    Returns:
        GridSpec
    """
    if n_lat < 1 or n_lon < 1:
        raise InvalidArgumentError(f"grid dimensions must be positive, got {n_lat}x{n_lon}")
    dlat = 180.0 / n_lat
    lat_centers = 90.0 - dlat / 2.0 - dlat * np.arange(n_lat, dtype=np.float64)
    lon_centers = (360.0 / n_lon) * np.arange(n_lon, dtype=np.float64)
    lat_centers.setflags(write=False)
    lon_centers.setflags(write=False)
    return GridSpec(n_lat=n_lat, n_lon=n_lon, lat_centers=lat_centers, lon_centers=lon_centers)


def latitude_weights(grid: GridSpec) -> np.ndarray:
    """cos(lat) per row, normalized to mean 1"""
    cos_lat = np.cos(np.deg2rad(grid.lat_centers))
    return cos_lat / cos_lat.mean()


def _as_utc(time: datetime) -> datetime:
    if time.tzinfo is None:
        return time.replace(tzinfo=timezone.utc)
    return time.astimezone(timezone.utc)


def _utc_hours(time: datetime) -> float:
    time = _as_utc(time)
    return time.hour + time.minute / 60.0 + time.second / 3600.0 + time.microsecond / 3.6e9


def day_of_year(time: datetime) -> float:
    """Fractional, zero-based day of year"""
    time = _as_utc(time)
    return (time.timetuple().tm_yday - 1) + _utc_hours(time) / 24.0


def solar_declination(time: datetime) -> float:
    """Declination in radians from the sinusoidal day-of-year approximation"""
    d = day_of_year(time)
    return np.deg2rad(-OBLIQUITY_DEG * np.cos(2.0 * np.pi * (d + SOLSTICE_OFFSET_DAYS) / DAYS_PER_YEAR))


def hour_angle(time: datetime, lon_deg: np.ndarray) -> np.ndarray:
    """Hour angle in radians; zero at solar noon (12 UTC on the prime meridian)"""
    return np.pi * (_utc_hours(time) / 12.0 - 1.0) + np.deg2rad(lon_deg)


def cos_zenith(time: datetime, grid: GridSpec) -> np.ndarray:
    """Cosine of the solar zenith angle on the grid, shape [n_lat, n_lon]"""
    decl = solar_declination(time)
    lat = np.deg2rad(grid.lat_centers)[:, None]
    h = hour_angle(time, grid.lon_centers)[None, :]
    cz = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(h)
    return np.clip(cz, -1.0, 1.0)
