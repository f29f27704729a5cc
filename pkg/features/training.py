"""Training: single-step pre-training, multi-step fine-tuning, checkpoints, gradient checks"""
import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

import config
from core.data import Dataset, n_samples, sample_sequence
from core.errors import InvalidArgumentError, NumericFailureError
from core.grid import GridSpec, latitude_weights, make_grid
from core.loss import Batch, LossWeights, build_loss_weights, collate, multi_step_loss
from core.model import INIT_STD, ForecastNet, ModelConfig, init_parameters, parameter_names
from core.schema import NormStats
from services.checkpoint_store import (
    load_model,
    load_optimizer,
    read_state,
    rng_state_from_hex,
    rng_state_to_hex,
    save_model,
    save_optimizer,
    write_state,
)

logger = logging.getLogger(__name__)

DEFAULT_CLIP_NORM = 32.0
TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    n_steps: int = 1
    seed: int = 0
    lat_weighting: bool = True
    channel_weighting: bool = False
    surface_emphasis: Optional[Dict[str, float]] = None
    grad_clip: bool = False
    grad_clip_norm: float = DEFAULT_CLIP_NORM
    schedule: Literal["cosine", "constant"] = "cosine"
    warmup_fraction: float = 0.05
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    detach_between_steps: bool = False
    max_train_samples: Optional[int] = None
    max_val_samples: Optional[int] = None
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return TORCH_DTYPES[self.dtype]


class FineTuneConfig(TrainConfig):
    """Multi-step continuation: lower learning rate, several unrolled steps"""
    learning_rate: float = 1e-4
    epochs: int = 3
    n_steps: int = 4


@dataclass
class Checkpoint:
    model: ForecastNet
    train_cfg: TrainConfig
    optimizer: torch.optim.Adam
    epoch: int = 0
    global_step: int = 0
    rng_state: Optional[torch.Tensor] = None
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    history: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=tuple(cfg.betas),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def scheduled_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over warmup_fraction of all steps, then cosine decay to 0"""
    base = cfg.learning_rate
    if cfg.schedule == "constant" or total_steps <= 0:
        return base
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    if step < warmup:
        return base * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def _named(params: Union[nn.Module, Mapping[str, torch.Tensor]]) -> List[Tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return list(params.named_parameters())
    return list(params.items())


def adam_step(
    params: Union[nn.Module, Mapping[str, torch.Tensor]],
    optimizer: torch.optim.Optimizer,
    lr: float,
    grad_clip_norm: Optional[float] = None,
) -> None:
    """
    One bias-corrected Adam update at learning rate `lr`.

    Raises:
        NumericFailureError: naming the first parameter with a non-finite gradient
    """
    named = _named(params)
    for name, param in named:
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NumericFailureError("non-finite gradient", tensor=name)
    if grad_clip_norm is not None:
        nn.utils.clip_grad_norm_([p for _, p in named], grad_clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def save_checkpoint(directory: Union[str, Path], ckpt: Checkpoint) -> None:
    directory = Path(directory)
    save_model(directory, ckpt.model)
    optimizer_state = save_optimizer(directory, ckpt.optimizer, parameter_names(ckpt.model))
    write_state(directory, {
        "train_config_kind": type(ckpt.train_cfg).__name__,
        "train_config": ckpt.train_cfg.model_dump(mode="json"),
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "rng_state": rng_state_to_hex(ckpt.rng_state) if ckpt.rng_state is not None else None,
        "best_epoch": ckpt.best_epoch,
        "best_val_loss": ckpt.best_val_loss,
        "history": ckpt.history,
        "optimizer": optimizer_state,
    })


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """
    Raises:
        NotFoundError, VersionMismatchError, TruncatedFileError, ChecksumError
    """
    directory = Path(directory)
    state = read_state(directory)
    model = load_model(directory)
    cfg_class = FineTuneConfig if state["train_config_kind"] == "FineTuneConfig" else TrainConfig
    train_cfg = cfg_class.model_validate(state["train_config"])
    optimizer = build_optimizer(model, train_cfg)
    load_optimizer(directory, optimizer, parameter_names(model), state["optimizer"])
    rng = state.get("rng_state")
    return Checkpoint(
        model=model,
        train_cfg=train_cfg,
        optimizer=optimizer,
        epoch=state["epoch"],
        global_step=state["global_step"],
        rng_state=rng_state_from_hex(rng) if rng else None,
        best_epoch=state["best_epoch"],
        best_val_loss=state["best_val_loss"],
        history=state["history"],
    )


def _sample_count(dataset: Dataset, split: str, n_steps: int, cap: Optional[int]) -> int:
    available = n_samples(dataset, split, n_steps)
    return available if cap is None else min(available, cap)


def _batches(indices: Sequence[int], batch_size: int) -> List[List[int]]:
    return [list(indices[i:i + batch_size]) for i in range(0, len(indices), batch_size)]


def evaluate_loss(
    model: ForecastNet,
    dataset: Dataset,
    cfg: TrainConfig,
    weights: LossWeights,
    stats: NormStats,
    split: str = "val",
) -> float:
    """Mean multi-step weighted MSE over a split, in eval mode"""
    model.eval()
    assert not model.training
    count = _sample_count(dataset, split, cfg.n_steps, cfg.max_val_samples)
    if count == 0:
        raise InvalidArgumentError(f"split '{split}' holds no {cfg.n_steps}-step sequences")
    totals = []
    with torch.no_grad():
        for chunk in _batches(range(count), cfg.batch_size):
            batch = collate(
                [sample_sequence(dataset, i, cfg.n_steps, split, stats) for i in chunk],
                dtype=cfg.torch_dtype,
            )
            loss = multi_step_loss(model, batch, weights, stats, cfg.n_steps)
            totals.append(loss.item() * len(chunk))
    return math.fsum(totals) / count


def write_metrics_log(path: Path, history: List[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record) + "\n")


def _fit(
    model: ForecastNet,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Path],
    until_epoch: Optional[int],
    resume: bool,
) -> Checkpoint:
    stats = dataset.stats
    if stats is None:
        raise InvalidArgumentError("dataset has no normalization statistics; run compute-stats first")
    weights = build_loss_weights(
        dataset.schema, dataset.grid, cfg.lat_weighting, cfg.channel_weighting, cfg.surface_emphasis
    )
    n_train = _sample_count(dataset, "train", cfg.n_steps, cfg.max_train_samples)
    if n_train == 0:
        raise InvalidArgumentError(f"train split holds no {cfg.n_steps}-step sequences")
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    clip = cfg.grad_clip_norm if cfg.grad_clip else None

    generator = torch.Generator().manual_seed(cfg.seed)
    last_dir = out_dir / "last" if out_dir is not None else None
    if resume and last_dir is not None and (last_dir / config.STATE_FILE).exists():
        ckpt = load_checkpoint(last_dir)
        if ckpt.train_cfg.model_dump() != cfg.model_dump():
            raise InvalidArgumentError(f"checkpoint in {last_dir} was written with a different training config")
        generator.set_state(ckpt.rng_state)
        logger.info("resuming from %s at epoch %d", last_dir, ckpt.epoch)
    else:
        model = model.to(cfg.torch_dtype)
        ckpt = Checkpoint(model=model, train_cfg=cfg, optimizer=build_optimizer(model, cfg))
    model, optimizer = ckpt.model, ckpt.optimizer

    stop = cfg.epochs if until_epoch is None else min(cfg.epochs, until_epoch)
    for epoch in range(ckpt.epoch, stop):
        model.train()
        order = torch.randperm(n_train, generator=generator).tolist()
        losses = []
        for chunk in _batches(order, cfg.batch_size):
            batch = collate(
                [sample_sequence(dataset, i, cfg.n_steps, "train", stats) for i in chunk],
                dtype=cfg.torch_dtype,
            )
            lr = scheduled_lr(ckpt.global_step, total_steps, cfg)
            optimizer.zero_grad()
            assert model.training
            try:
                loss = multi_step_loss(
                    model, batch, weights, stats, cfg.n_steps, cfg.detach_between_steps, generator
                )
                loss.backward()
                adam_step(model, optimizer, lr, clip)
            except NumericFailureError as e:
                raise e.with_context(epoch=epoch + 1) from e
            losses.append(loss.item())
            ckpt.global_step += 1

        train_loss = math.fsum(losses) / len(losses)
        val_loss = evaluate_loss(model, dataset, cfg, weights, stats)
        ckpt.epoch = epoch + 1
        ckpt.rng_state = generator.get_state()
        ckpt.history.append({
            "epoch": ckpt.epoch,
            "global_step": ckpt.global_step,
            "lr": lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
        })
        improved = ckpt.best_val_loss is None or val_loss < ckpt.best_val_loss
        if improved:
            ckpt.best_epoch, ckpt.best_val_loss = ckpt.epoch, val_loss
        logger.info(
            "epoch %d/%d train=%.6g val=%.6g lr=%.3g%s",
            ckpt.epoch, cfg.epochs, train_loss, val_loss, lr, " (best)" if improved else "",
        )
        if out_dir is not None:
            if improved:
                save_checkpoint(out_dir / "best", ckpt)
            save_checkpoint(last_dir, ckpt)
            write_metrics_log(out_dir / config.METRICS_LOG_FILE, ckpt.history)
    return ckpt


def train(
    model_cfg: ModelConfig,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    until_epoch: Optional[int] = None,
    resume: bool = True,
) -> Checkpoint:
    """
    Pre-train a fresh model on shuffled (seeded) samples.

    Per epoch: cosine schedule with linear warmup, validation weighted MSE, the best
    checkpoint kept under out_dir/best and the latest under out_dir/last, and the
    metric history rewritten to out_dir/metrics.jsonl. An existing out_dir/last is
    resumed; until_epoch stops early without changing the schedule.
    """
    model_cfg = model_cfg.for_schema(dataset.schema)
    model = init_parameters(model_cfg, dataset.grid, cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    return _fit(model, dataset, cfg, out_dir, until_epoch, resume)


def fine_tune(
    checkpoint: Checkpoint,
    dataset: Dataset,
    n_steps: int,
    cfg: Optional[FineTuneConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
    until_epoch: Optional[int] = None,
    resume: bool = True,
) -> Checkpoint:
    """Continue training a copy of checkpoint.model on the n_steps unrolled loss with fresh Adam moments"""
    cfg = (cfg or FineTuneConfig()).model_copy(update={"n_steps": n_steps})
    model = copy.deepcopy(checkpoint.model)
    out_dir = Path(out_dir) if out_dir is not None else None
    return _fit(model, dataset, cfg, out_dir, until_epoch, resume)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: Dict[str, float]
    n_coords: int
    n_parameters: int
    n_steps: int = 1

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "max_rel_error": self.max_rel_error,
            "per_tensor": self.per_tensor,
            "n_coords": self.n_coords,
            "n_parameters": self.n_parameters,
            "n_steps": self.n_steps,
        }


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Sequence[Tuple[str, torch.Tensor]],
    n_coords: int = 200,
    h: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare autograd gradients with central differences on a random subset of coordinates.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-3 * rms(grad of the tensor)).
    """
    for _, param in named_params:
        param.grad = None
    loss_fn().backward()
    analytic = {name: param.grad.detach().clone() for name, param in named_params}
    generator = torch.Generator().manual_seed(seed)
    per_tensor, checked = {}, 0
    with torch.no_grad():
        for name, param in named_params:
            flat = param.data.view(-1)
            grad = analytic[name].view(-1)
            floor = 1e-3 * grad.pow(2).mean().sqrt().item()
            coords = torch.randperm(flat.numel(), generator=generator)[:n_coords].tolist()
            worst = 0.0
            for i in coords:
                original = flat[i].item()
                flat[i] = original + h
                up = loss_fn().item()
                flat[i] = original - h
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * h)
                exact = grad[i].item()
                denom = max(abs(exact), abs(numeric), floor)
                if denom > 0:
                    worst = max(worst, abs(exact - numeric) / denom)
            per_tensor[name] = worst
            checked += len(coords)
    return GradCheckReport(
        max_rel_error=max(per_tensor.values(), default=0.0),
        per_tensor=per_tensor,
        n_coords=checked,
        n_parameters=sum(p.numel() for _, p in named_params),
    )


TINY_MODEL = ModelConfig(
    embed_dim=16, depth=2, patch_size=2, n_heads=2, window=(2, 4),
    drop_path_rate=0.0, in_channels=5, out_channels=3,
)


def _random_problem(
    cfg: ModelConfig, grid: GridSpec, n_steps: int, generator: torch.Generator, dtype: torch.dtype
) -> Tuple[Batch, NormStats, LossWeights]:
    n_prog, n_static = cfg.out_channels, cfg.in_channels - cfg.out_channels
    h, w = grid.shape

    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype)

    batch = Batch(
        inputs=randn(1, cfg.in_channels, h, w),
        targets=randn(1, n_steps, n_prog, h, w),
        statics=randn(1, n_steps + 1, n_static, h, w),
    )
    rand = torch.rand(3, n_prog, generator=generator, dtype=torch.float64).numpy()
    stats = NormStats(mean=rand[0], std=1.0 + rand[1], diff_std=0.2 + rand[2])
    weights = LossWeights(
        channel=0.5 + torch.rand(n_prog, generator=generator, dtype=torch.float64).numpy(),
        latitude=latitude_weights(grid),
        channel_weighting=True,
        lat_weighting=True,
    )
    return batch, stats, weights


def gradient_check(
    model_cfg: ModelConfig = TINY_MODEL,
    seed: int = 0,
    n_steps: int = 1,
    grid: Optional[GridSpec] = None,
    n_coords: int = 200,
    h: float = 1e-4,
) -> GradCheckReport:
    """
    Finite-difference check of the n_steps unrolled loss of a small transformer in float64.

    Head, position embedding and logit scales are randomized first so that no
    gradient is identically zero.
    """
    grid = grid or make_grid(8, 16)
    cfg = model_cfg.model_copy(update={"drop_path_rate": 0.0, "activation_checkpointing": False})
    model = init_parameters(cfg, grid, seed).double()
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.head.weight.copy_(INIT_STD * torch.randn(model.head.weight.shape, generator=generator, dtype=torch.float64))
        model.pos_embed.copy_(INIT_STD * torch.randn(model.pos_embed.shape, generator=generator, dtype=torch.float64))
        for block in model.blocks:
            scale = block.attn.logit_scale
            scale.copy_(torch.rand(scale.shape, generator=generator, dtype=torch.float64) - 0.5)
    model.eval()
    batch, stats, weights = _random_problem(cfg, grid, n_steps, generator, torch.float64)
    report = finite_difference_check(
        lambda: multi_step_loss(model, batch, weights, stats, n_steps),
        list(model.named_parameters()),
        n_coords=n_coords,
        h=h,
        seed=seed,
    )
    report.n_steps = n_steps
    logger.info("gradient check (%d-step): max relative error %.3g over %d coordinates",
                n_steps, report.max_rel_error, report.n_coords)
    return report


def measure_activation_memory(
    model_cfg: ModelConfig,
    grid: GridSpec,
    steps: Sequence[int],
    checkpointing: bool = False,
    batch_size: int = 1,
    seed: int = 0,
) -> Dict[int, int]:
    """
    Bytes of activations kept for backward by the unrolled loss, per n_steps.

    Parameters are excluded; each storage is counted once. With activation
    recomputation only block inputs remain saved.
    """
    cfg = model_cfg.model_copy(update={"activation_checkpointing": checkpointing})
    model = init_parameters(cfg, grid, seed)
    model.train()
    generator = torch.Generator().manual_seed(seed)
    param_storages = {p.untyped_storage().data_ptr() for p in model.parameters()}
    usage = {}
    for n_steps in steps:
        batch, stats, weights = _random_problem(cfg, grid, n_steps, generator, torch.float32)
        batch = Batch(
            inputs=batch.inputs.expand(batch_size, -1, -1, -1).contiguous(),
            targets=batch.targets.expand(batch_size, -1, -1, -1, -1).contiguous(),
            statics=batch.statics.expand(batch_size, -1, -1, -1, -1).contiguous(),
        )
        seen, total = set(), 0

        def pack(tensor: torch.Tensor) -> torch.Tensor:
            nonlocal total
            storage = tensor.untyped_storage()
            ptr = storage.data_ptr()
            if ptr not in param_storages and ptr not in seen:
                seen.add(ptr)
                total += storage.nbytes()
            return tensor

        with torch.autograd.graph.saved_tensors_hooks(pack, lambda tensor: tensor):
            loss = multi_step_loss(model, batch, weights, stats, n_steps, generator=generator)
        loss.backward()
        model.zero_grad()
        usage[n_steps] = total
        logger.info("activation memory, %d steps%s: %d bytes",
                    n_steps, " (recomputed)" if checkpointing else "", total)
    return usage
