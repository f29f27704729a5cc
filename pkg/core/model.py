"""Shifted-window attention forecast network

SwinV2-style blocks (scaled-cosine attention, res-post-norm) with three changes for
global lat-lon fields:
- windows are shifted by a circular roll and only the meridional wrap seam is masked,
  so zonal neighbours across the date line attend to each other
- an absolute position embedding is added right after patch embedding
- no patch merging: every block sees the same token grid
"""
import logging
import math
from typing import Dict, Any, List, Literal, Optional, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn
from torch.utils.checkpoint import checkpoint

from core.errors import InvalidArgumentError, NumericFailureError
from core.grid import GridSpec
from core.schema import ChannelSchema

logger = logging.getLogger(__name__)

MASK_VALUE = -1.0e4
MAX_LOGIT_SCALE = math.log(100.0)
INIT_STD = 0.02

PRESETS: Dict[str, Dict[str, Any]] = {
    "baseline": dict(embed_dim=768, depth=12, patch_size=4, n_heads=8, window=(9, 18), drop_path_rate=0.1),
    "deep": dict(embed_dim=768, depth=24, patch_size=4, n_heads=8, window=(9, 18), drop_path_rate=0.1),
    "wide": dict(embed_dim=1536, depth=12, patch_size=4, n_heads=8, window=(9, 18), drop_path_rate=0.1),
    "desk": dict(embed_dim=96, depth=4, patch_size=4, n_heads=4, window=(4, 8), drop_path_rate=0.1),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embed_dim: int = 96
    depth: int = 4
    patch_size: int = 4
    n_heads: int = 4
    window: Tuple[int, int] = (4, 8)
    drop_path_rate: float = 0.1
    mlp_ratio: float = 4.0
    prediction_mode: Literal["direct", "residual"] = "residual"
    in_channels: int = 11
    out_channels: int = 8
    activation_checkpointing: bool = False

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if min(self.embed_dim, self.depth, self.patch_size, self.n_heads) < 1:
            raise ValueError("embed_dim, depth, patch_size and n_heads must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if min(self.window) < 1:
            raise ValueError("window sides must be >= 1")
        if not 0 <= self.drop_path_rate < 1:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        if self.out_channels < 1 or self.in_channels < self.out_channels:
            raise ValueError("need 1 <= out_channels <= in_channels")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise InvalidArgumentError(f"unknown model preset '{name}' (known: {', '.join(PRESETS)})")
        return cls(**{**PRESETS[name], **overrides})

    def for_schema(self, schema: ChannelSchema) -> "ModelConfig":
        """Copy with channel counts taken from a schema"""
        return self.model_copy(update={
            "in_channels": len(schema.channels),
            "out_channels": schema.n_prognostic,
        })

    @property
    def shift(self) -> Tuple[int, int]:
        return self.window[0] // 2, self.window[1] // 2

    def token_grid(self, grid: GridSpec) -> Tuple[int, int]:
        return grid.n_lat // self.patch_size, grid.n_lon // self.patch_size

    def validate_grid(self, grid: GridSpec) -> None:
        grid.check_divisible(self.patch_size)
        t_h, t_w = self.token_grid(grid)
        w_h, w_w = self.window
        if t_h % w_h or t_w % w_w:
            raise InvalidArgumentError(
                f"token grid {t_h}x{t_w} is not divisible by window {w_h}x{w_w}"
            )


def window_partition(tokens: torch.Tensor, window: Tuple[int, int], shift: Tuple[int, int] = (0, 0)) -> torch.Tensor:
    """
    Roll tokens by (-s_h, -s_w) and cut them into non-overlapping windows.

    Args:
        tokens: [B, T_h, T_w, D]
        window: (w_h, w_w) in tokens
        shift: (s_h, s_w), each in [0, w)

    Returns:
        [B * n_windows, w_h * w_w, D], windows ordered row-major over the window grid
    """
    b, t_h, t_w, d = tokens.shape
    w_h, w_w = window
    s_h, s_w = shift
    if t_h % w_h or t_w % w_w:
        raise InvalidArgumentError(f"token grid {t_h}x{t_w} is not divisible by window {w_h}x{w_w}")
    if not (0 <= s_h < w_h and 0 <= s_w < w_w):
        raise InvalidArgumentError(f"shift {shift} outside window {window}")
    if s_h or s_w:
        tokens = torch.roll(tokens, shifts=(-s_h, -s_w), dims=(1, 2))
    windows = tokens.reshape(b, t_h // w_h, w_h, t_w // w_w, w_w, d).permute(0, 1, 3, 2, 4, 5)
    return windows.reshape(-1, w_h * w_w, d)


def window_reverse(
    windows: torch.Tensor,
    window: Tuple[int, int],
    t_h: int,
    t_w: int,
    shift: Tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Inverse of window_partition: [B * n_windows, N, D] -> [B, T_h, T_w, D]"""
    w_h, w_w = window
    d = windows.shape[-1]
    b = windows.shape[0] // ((t_h // w_h) * (t_w // w_w))
    tokens = windows.reshape(b, t_h // w_h, t_w // w_w, w_h, w_w, d).permute(0, 1, 3, 2, 4, 5)
    tokens = tokens.reshape(b, t_h, t_w, d)
    if shift[0] or shift[1]:
        tokens = torch.roll(tokens, shifts=shift, dims=(1, 2))
    return tokens


def meridional_mask(t_h: int, w_h: int, s_h: int, w_w: int = 1) -> torch.Tensor:
    """
    Additive attention mask for one column of windows after a meridional roll of s_h.

    Rows that wrapped from the top of the globe to the bottom must not attend to the
    rows they now sit next to. Zonal pairs are never masked (longitude is periodic).

    Returns:
        [t_h // w_h, w_h * w_w, w_h * w_w]; MASK_VALUE across the seam, 0 elsewhere
    """
    if not 0 <= s_h < w_h:
        raise InvalidArgumentError(f"meridional shift {s_h} outside [0, {w_h})")
    side = torch.zeros(t_h)
    if s_h:
        side[t_h - s_h:] = 1.0
    per_token = side.view(t_h // w_h, w_h, 1).expand(-1, -1, w_w).reshape(t_h // w_h, w_h * w_w)
    crosses = per_token[:, :, None] != per_token[:, None, :]
    return torch.zeros(crosses.shape).masked_fill(crosses, MASK_VALUE)


def drop_path(x: torch.Tensor, keep: Optional[torch.Tensor], keep_prob: float) -> torch.Tensor:
    """Scale each sample's branch by keep / keep_prob; keep is [B] boolean or None"""
    if keep is None:
        return x
    return x * (keep.to(x.dtype) / keep_prob).view(-1, *([1] * (x.dim() - 1)))


class WindowAttention(nn.Module):
    """Scaled-cosine multi-head attention inside each window, no relative position bias"""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.zeros(n_heads, 1, 1))

    def attention_weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        b_w, n, d = x.shape
        qkv = self.qkv(x).view(b_w, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1)
        logits = logits * torch.clamp(self.logit_scale, max=MAX_LOGIT_SCALE).exp()
        if mask is not None:
            n_windows = mask.shape[0]
            logits = logits.view(-1, n_windows, self.n_heads, n, n) + mask[None, :, None].to(logits.dtype)
            logits = logits.view(b_w, self.n_heads, n, n)
        return logits.softmax(dim=-1), v

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            x: [B * n_windows, N, D]
            mask: [n_windows, N, N] additive mask, or None
        """
        weights, v = self.attention_weights(x, mask)
        out = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Window attention + MLP, each followed by LayerNorm before its residual add"""

    def __init__(self, cfg: ModelConfig, token_grid: Tuple[int, int], shift: Tuple[int, int]):
        super().__init__()
        self.window = tuple(cfg.window)
        self.shift = shift
        self.token_grid = token_grid
        self.keep_prob = 1.0 - cfg.drop_path_rate
        self.attn = WindowAttention(cfg.embed_dim, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio))
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        t_h, t_w = token_grid
        mask = None
        if shift[0]:
            mask = meridional_mask(t_h, self.window[0], shift[0], self.window[1])
            mask = mask.repeat_interleave(t_w // self.window[1], dim=0)
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor, keep: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            x: [B, T_h, T_w, D]
            keep: [2, B] drop-path keep flags for the attention and MLP branches
        """
        t_h, t_w = self.token_grid
        windows = window_partition(x, self.window, self.shift)
        windows = self.attn(windows, self.attn_mask)
        y = window_reverse(windows, self.window, t_h, t_w, self.shift)
        x = x + drop_path(self.norm1(y), None if keep is None else keep[0], self.keep_prob)
        x = x + drop_path(self.norm2(self.mlp(x)), None if keep is None else keep[1], self.keep_prob)
        return x


class ForecastNet(nn.Module):
    """
    One-step forecast network on a fixed grid.

    Input [B, C_in, H, W] (normalized prognostic channels then statics), output
    [B, C_out, H, W]: the normalized next state (direct mode) or the next-state
    increment in units of the temporal-difference std (residual mode).
    """

    def __init__(self, cfg: ModelConfig, grid: GridSpec):
        super().__init__()
        cfg.validate_grid(grid)
        self.cfg = cfg
        self.grid = grid
        p = cfg.patch_size
        self.token_grid = cfg.token_grid(grid)
        t_h, t_w = self.token_grid
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, t_h, t_w, cfg.embed_dim))
        self.blocks = nn.ModuleList([
            Block(cfg, self.token_grid, (0, 0) if i % 2 == 0 else cfg.shift)
            for i in range(cfg.depth)
        ])
        self.head = nn.Linear(cfg.embed_dim, p * p * cfg.out_channels)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Patch embedding plus absolute position embedding: [B, C_in, H, W] -> [B, T_h, T_w, D]"""
        expected = (self.cfg.in_channels, self.grid.n_lat, self.grid.n_lon)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidArgumentError(f"input shape {tuple(x.shape)} does not match [B, {expected}]")
        return self.patch_embed(x).permute(0, 2, 3, 1) + self.pos_embed

    def unpatchify(self, y: torch.Tensor) -> torch.Tensor:
        """[B, T_h, T_w, p*p*C_out] -> [B, C_out, H, W]"""
        b, t_h, t_w, _ = y.shape
        p = self.cfg.patch_size
        c = self.cfg.out_channels
        y = y.reshape(b, t_h, t_w, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return y.reshape(b, c, t_h * p, t_w * p)

    def keep_masks(self, batch: int, generator: Optional[torch.Generator]) -> Optional[torch.Tensor]:
        """[depth, 2, B] drop-path keep flags, drawn before any block runs"""
        if not self.training or self.cfg.drop_path_rate == 0:
            return None
        device = self.pos_embed.device
        draws = torch.rand((self.cfg.depth, 2, batch), generator=generator, device=device)
        return draws < 1.0 - self.cfg.drop_path_rate

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        tokens = self.embed(x)
        keep = self.keep_masks(x.shape[0], generator)
        for i, block in enumerate(self.blocks):
            block_keep = None if keep is None else keep[i]
            if self.cfg.activation_checkpointing and self.training and torch.is_grad_enabled():
                tokens = checkpoint(block, tokens, block_keep, use_reentrant=False)
            else:
                tokens = block(tokens, block_keep)
            if not torch.isfinite(tokens).all():
                raise NumericFailureError("non-finite activations", block=i)
        return self.unpatchify(self.head(tokens))


def init_parameters(cfg: ModelConfig, grid: GridSpec, seed: int) -> ForecastNet:
    """
    Build a ForecastNet with deterministic initial weights.

    Linear and patch-embedding weights are truncated normal (std 0.02, cut at 2 std)
    drawn from a generator seeded with `seed`; biases, the position embedding and the
    decoder head start at zero, so residual mode starts as the persistence forecast.
    """
    model = ForecastNet(cfg, grid)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(
                    module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
                )
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        model.pos_embed.zero_()
        model.head.weight.zero_()
        model.head.bias.zero_()
        for block in model.blocks:
            block.attn.logit_scale.zero_()
    logger.debug("initialized model with %d parameters (seed %d)", parameter_count(model), seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_names(model: nn.Module) -> List[str]:
    return [name for name, _ in model.named_parameters()]
