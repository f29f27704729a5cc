"""Loss weighting, prediction targets and the multi-step objective"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import torch
from torch import nn

from core.data import Sample
from core.errors import InvalidArgumentError, NumericFailureError
from core.grid import GridSpec, latitude_weights
from core.schema import ChannelSchema, NormStats

logger = logging.getLogger(__name__)

PredictionMode = Literal["direct", "residual"]
PREDICTION_MODES = ("direct", "residual")

# Surface emphasis: 2m temperature gets full weight, other surface channels 0.1
DEFAULT_SURFACE_EMPHASIS: Dict[str, float] = {"t2m": 1.0}
DEFAULT_SURFACE_WEIGHT = 0.1


@dataclass(frozen=True)
class LossWeights:
    """Per-channel and per-latitude-row loss weights, each with mean 1 when enabled"""
    channel: np.ndarray
    latitude: np.ndarray
    channel_weighting: bool = False
    lat_weighting: bool = False

    def __post_init__(self):
        for name in ("channel", "latitude"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(values < 0) or not np.all(np.isfinite(values)):
                raise InvalidArgumentError(f"{name} weights must be finite and >= 0")
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    @classmethod
    def uniform(cls, n_channels: int, n_lat: int) -> "LossWeights":
        return cls(channel=np.ones(n_channels), latitude=np.ones(n_lat))

    def scaled(self, factor: float) -> "LossWeights":
        """Weights with the channel vector multiplied by a constant"""
        return LossWeights(
            channel=self.channel * factor,
            latitude=self.latitude,
            channel_weighting=True,
            lat_weighting=self.lat_weighting,
        )

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.channel == 1.0) and np.all(self.latitude == 1.0))


def level_weights(levels: Sequence[int]) -> np.ndarray:
    """Raw weights proportional to pressure, summing to 1 over one variable's levels"""
    levels = np.asarray(levels, dtype=np.float64)
    return levels / levels.sum()


def channel_weights(
    schema: ChannelSchema,
    surface_emphasis: Optional[Dict[str, float]] = None,
    enabled: bool = True,
) -> np.ndarray:
    """
    Per prognostic channel weights with mean 1.

    Pressure-level channels of one variable share weight in proportion to pressure
    (50 hPa gets 1/20 of 1000 hPa). Surface channels take their weight from
    surface_emphasis, defaulting to 1.0 for t2m and 0.1 otherwise.
    """
    prognostic = schema.prognostic
    if not enabled:
        return np.ones(len(prognostic))
    surface_labels = {c.label for c in prognostic if c.is_surface}
    unknown = sorted(set(surface_emphasis or {}) - surface_labels)
    if unknown:
        raise InvalidArgumentError(f"surface_emphasis names unknown surface channels: {', '.join(unknown)}")
    emphasis = {**DEFAULT_SURFACE_EMPHASIS, **(surface_emphasis or {})}

    raw = np.zeros(len(prognostic))
    by_variable: Dict[str, List[int]] = {}
    for i, channel in enumerate(prognostic):
        if channel.is_surface:
            raw[i] = emphasis.get(channel.label, DEFAULT_SURFACE_WEIGHT)
        else:
            by_variable.setdefault(channel.name, []).append(i)
    for indices in by_variable.values():
        raw[indices] = level_weights([prognostic[i].level_hPa for i in indices])
    if raw.sum() <= 0:
        raise InvalidArgumentError("channel weights sum to zero")
    return raw / raw.mean()


def build_loss_weights(
    schema: ChannelSchema,
    grid: GridSpec,
    lat_weighting: bool = True,
    channel_weighting: bool = False,
    surface_emphasis: Optional[Dict[str, float]] = None,
) -> LossWeights:
    channel = channel_weights(schema, surface_emphasis, enabled=channel_weighting)
    latitude = latitude_weights(grid) if lat_weighting else np.ones(grid.n_lat)
    return LossWeights(
        channel=channel,
        latitude=latitude,
        channel_weighting=channel_weighting,
        lat_weighting=lat_weighting,
    )


def _channel_vector(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """[C] statistics as a [C, 1, 1] tensor matching `like`"""
    return torch.as_tensor(values, dtype=like.dtype, device=like.device).view(-1, 1, 1)


def _check_mode(mode: str) -> None:
    if mode not in PREDICTION_MODES:
        raise InvalidArgumentError(f"unknown prediction mode '{mode}'")


def _check_stats(x: torch.Tensor, stats: NormStats) -> None:
    if x.dim() < 3 or x.shape[-3] != stats.n_channels:
        raise InvalidArgumentError(
            f"state with {x.shape[-3] if x.dim() >= 3 else '?'} channels does not match "
            f"{stats.n_channels} normalization channels"
        )


def prediction_target(
    x_t: torch.Tensor,
    x_next: torch.Tensor,
    mode: PredictionMode,
    stats: NormStats,
    normalized: bool = False,
) -> torch.Tensor:
    """
    Training target for one step.

    direct   -> (X_{t+dt} - mu) / sigma
    residual -> (X_{t+dt} - X_t) / sigma_dX

    Args:
        x_t, x_next: prognostic states [..., C_p, H, W]
        normalized: inputs are already (X - mu) / sigma; the target is unchanged
    """
    _check_mode(mode)
    _check_stats(x_next, stats)
    if x_t.shape != x_next.shape:
        raise InvalidArgumentError(f"state shapes differ: {tuple(x_t.shape)} vs {tuple(x_next.shape)}")
    if mode == "direct":
        if normalized:
            return x_next
        return (x_next - _channel_vector(stats.mean, x_next)) / _channel_vector(stats.std, x_next)
    if normalized:
        return (x_next - x_t) / _channel_vector(stats.residual_scale, x_next)
    return (x_next - x_t) / _channel_vector(stats.diff_std, x_next)


def reconstruct_next(
    x_t: torch.Tensor,
    output: torch.Tensor,
    mode: PredictionMode,
    stats: NormStats,
) -> torch.Tensor:
    """Normalized next state from a normalized state and the network output"""
    _check_mode(mode)
    if mode == "direct":
        return output
    return x_t + _channel_vector(stats.residual_scale, output) * output


def weighted_mse(pred: torch.Tensor, target: torch.Tensor, weights: Optional[LossWeights] = None) -> torch.Tensor:
    """
    Mean over all elements of w_c * w_lat(row) * (pred - target)^2.

    Tensors are [..., C, H, W]; the leading axes (batch) are averaged too.
    """
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    squared = (pred - target) ** 2
    if weights is None or weights.is_uniform:
        return squared.mean()
    c, h = pred.shape[-3], pred.shape[-2]
    if weights.channel.shape[0] != c or weights.latitude.shape[0] != h:
        raise InvalidArgumentError(
            f"weights for {weights.channel.shape[0]} channels x {weights.latitude.shape[0]} rows "
            f"do not fit tensors with {c} channels x {h} rows"
        )
    w_c = torch.as_tensor(weights.channel, dtype=pred.dtype, device=pred.device).view(-1, 1, 1)
    w_lat = torch.as_tensor(weights.latitude, dtype=pred.dtype, device=pred.device).view(1, -1, 1)
    return (squared * w_c * w_lat).mean()


@dataclass
class Batch:
    """Stacked samples as tensors"""
    inputs: torch.Tensor    # [B, C_in, H, W]
    targets: torch.Tensor   # [B, n_steps, C_p, H, W]
    statics: torch.Tensor   # [B, n_steps + 1, C_s, H, W]

    @property
    def n_steps(self) -> int:
        return int(self.targets.shape[1])


def collate(samples: Sequence[Sample], dtype: torch.dtype = torch.float32, device: str = "cpu") -> Batch:
    def stack(name: str) -> torch.Tensor:
        values = np.stack([getattr(s, name) for s in samples])
        return torch.as_tensor(values, dtype=dtype, device=device)

    return Batch(inputs=stack("inputs"), targets=stack("targets"), statics=stack("statics"))


def multi_step_loss(
    model: nn.Module,
    batch: Batch,
    weights: Optional[LossWeights],
    stats: NormStats,
    n_steps: Optional[int] = None,
    detach_between_steps: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Unroll the model n_steps times from X_t and average the per-step weighted MSE.

    Each step feeds the model its own reconstructed state plus that step's statics
    (cos_zenith at the step's valid time). Gradients flow through the whole chain
    unless detach_between_steps is set.

    Raises:
        NumericFailureError: with the step index of the first non-finite loss or activation
    """
    n_steps = batch.n_steps if n_steps is None else n_steps
    if not 1 <= n_steps <= batch.n_steps:
        raise InvalidArgumentError(f"n_steps={n_steps} needs 1..{batch.n_steps} targets")
    mode = model.cfg.prediction_mode
    n_prog = batch.targets.shape[2]
    state = batch.inputs[:, :n_prog]
    losses = []
    for step in range(n_steps):
        x_in = torch.cat([state, batch.statics[:, step]], dim=1)
        try:
            output = model(x_in, generator)
        except NumericFailureError as e:
            raise e.with_context(step=step) from e
        target = prediction_target(state, batch.targets[:, step], mode, stats, normalized=True)
        loss = weighted_mse(output, target, weights)
        if not torch.isfinite(loss):
            raise NumericFailureError("non-finite loss", step=step)
        losses.append(loss)
        state = reconstruct_next(state, output, mode, stats)
        if detach_between_steps:
            state = state.detach()
    return torch.stack(losses).mean()
