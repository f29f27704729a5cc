"""Channel schema and normalization statistics"""
from dataclasses import dataclass
from typing import Dict, Any, List, Optional, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from core.errors import InvalidArgumentError

# Canonical pressure-level vocabulary (hPa)
PRESSURE_LEVELS = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000]

# ERA5-shaped variable sets
LEVEL_VARIABLES = ["z", "u", "v", "t", "q"]
SURFACE_VARIABLES = ["u10", "v10", "u100", "v100", "t2m", "sp", "msl", "tcwv"]
STATIC_VARIABLES = ["land_sea_mask", "orography", "cos_zenith"]

# Channel recomputed from the valid time instead of held constant
COS_ZENITH = "cos_zenith"

# Level order used when a toy schema carries fewer than 13 levels per variable
TOY_LEVEL_ORDER = [500, 850, 1000, 250, 700, 925, 100, 300, 600, 150, 400, 200, 50]


class Channel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    level_hPa: Optional[int] = None
    kind: Literal["prognostic", "static"] = "prognostic"

    @property
    def label(self) -> str:
        return f"{self.name}{self.level_hPa}" if self.level_hPa is not None else self.name

    @property
    def is_surface(self) -> bool:
        return self.kind == "prognostic" and self.level_hPa is None


class ChannelSchema(BaseModel):
    """Ordered channel definitions: prognostic channels first, then statics"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: List[Channel]

    @model_validator(mode="after")
    def _check_channels(self) -> "ChannelSchema":
        seen = set()
        for channel in self.channels:
            key = (channel.name, channel.level_hPa)
            if key in seen:
                raise ValueError(f"duplicate channel {channel.label}")
            seen.add(key)
            if channel.kind == "static" and channel.level_hPa is not None:
                raise ValueError(f"static channel {channel.name} cannot carry a level")
        if not any(c.kind == "prognostic" for c in self.channels):
            raise ValueError("schema needs at least one prognostic channel")
        kinds = [c.kind for c in self.channels]
        if "static" in kinds and "prognostic" in kinds[kinds.index("static"):]:
            raise ValueError("prognostic channels must precede static channels")
        return self

    @property
    def labels(self) -> List[str]:
        return [c.label for c in self.channels]

    @property
    def prognostic(self) -> List[Channel]:
        return [c for c in self.channels if c.kind == "prognostic"]

    @property
    def static(self) -> List[Channel]:
        return [c for c in self.channels if c.kind == "static"]

    @property
    def n_prognostic(self) -> int:
        return len(self.prognostic)

    @property
    def n_static(self) -> int:
        return len(self.static)

    def index(self, label: str) -> int:
        """Position of a channel label in the full channel list"""
        try:
            return self.labels.index(label)
        except ValueError:
            raise InvalidArgumentError(f"unknown channel '{label}'") from None

    def prognostic_index(self, label: str) -> int:
        index = self.index(label)
        if index >= self.n_prognostic:
            raise InvalidArgumentError(f"channel '{label}' is not prognostic")
        return index


def _pick_levels(count: int) -> List[int]:
    """First `count` levels of the toy preference order, returned top-down"""
    if count > len(TOY_LEVEL_ORDER):
        raise InvalidArgumentError(f"at most {len(TOY_LEVEL_ORDER)} levels per variable")
    return sorted(TOY_LEVEL_ORDER[:max(count, 0)])


def toy_schema(n_prognostic: int, with_statics: bool = True) -> ChannelSchema:
    """
    Small ERA5-like schema: t2m and u10 at the surface, then z and t on pressure levels.

    n_prognostic=8 gives t2m, u10, z500, z850, z1000, t500, t850, t1000.
    """
    if n_prognostic < 1:
        raise InvalidArgumentError("need at least one prognostic channel")
    channels = [Channel(name=name) for name in ["t2m", "u10"][:n_prognostic]]
    remaining = n_prognostic - len(channels)
    z_count = (remaining + 1) // 2
    t_count = remaining - z_count
    channels += [Channel(name="z", level_hPa=level) for level in _pick_levels(z_count)]
    channels += [Channel(name="t", level_hPa=level) for level in _pick_levels(t_count)]
    if with_statics:
        channels += [Channel(name=name, kind="static") for name in STATIC_VARIABLES]
    return ChannelSchema(channels=channels)


def era5_schema() -> ChannelSchema:
    """73 prognostic channels (5 variables x 13 levels + 8 surface) plus 3 static inputs"""
    channels = [
        Channel(name=var, level_hPa=level) for var in LEVEL_VARIABLES for level in PRESSURE_LEVELS
    ]
    channels += [Channel(name=name) for name in SURFACE_VARIABLES]
    channels += [Channel(name=name, kind="static") for name in STATIC_VARIABLES]
    return ChannelSchema(channels=channels)


@dataclass(frozen=True)
class NormStats:
    """Per prognostic channel mean, std and temporal-difference std (field units)"""
    mean: np.ndarray
    std: np.ndarray
    diff_std: np.ndarray

    def __post_init__(self):
        for name in ("mean", "std", "diff_std"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        if not (self.mean.shape == self.std.shape == self.diff_std.shape):
            raise InvalidArgumentError("norm stats vectors must share one length")
        if np.any(self.std <= 0) or np.any(self.diff_std <= 0):
            raise InvalidArgumentError("norm stats require std > 0 and diff_std > 0")

    @property
    def n_channels(self) -> int:
        return int(self.mean.shape[0])

    @property
    def residual_scale(self) -> np.ndarray:
        """sigma_dX / sigma: converts a residual-target unit into normalized-state units"""
        return self.diff_std / self.std

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """(X - mu) / sigma over the leading channel axis of [..., C, H, W]"""
        return ((values - self.mean[:, None, None]) / self.std[:, None, None]).astype(values.dtype)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return (values * self.std[:, None, None] + self.mean[:, None, None]).astype(values.dtype)

    @classmethod
    def identity(cls, n_channels: int) -> "NormStats":
        """Unit statistics; normalization becomes the identity"""
        ones = np.ones(n_channels)
        return cls(mean=np.zeros(n_channels), std=ones, diff_std=ones)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "diff_std": self.diff_std.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(mean=data["mean"], std=data["std"], diff_std=data["diff_std"])
