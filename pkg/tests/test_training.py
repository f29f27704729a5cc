import math

import pytest
import torch
from pydantic import ValidationError

import config
from core.errors import ChecksumError, InvalidArgumentError, NumericFailureError
from core.grid import make_grid
from core.loss import build_loss_weights
from core.model import init_parameters
from features.training import (
    FineTuneConfig,
    TrainConfig,
    adam_step,
    evaluate_loss,
    fine_tune,
    finite_difference_check,
    gradient_check,
    load_checkpoint,
    measure_activation_memory,
    scheduled_lr,
    train,
)


def _quick(**overrides):
    values = dict(learning_rate=1e-3, batch_size=4, epochs=2, seed=3, max_train_samples=8, max_val_samples=4)
    values.update(overrides)
    return TrainConfig(**values)


def _same_weights(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(n_steps=0)
    with pytest.raises(ValidationError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rat=1e-3)
    assert FineTuneConfig().learning_rate < TrainConfig().learning_rate


def test_schedule_warmup_then_cosine():
    cfg = TrainConfig(learning_rate=1.0, warmup_fraction=0.1)
    total = 100
    assert scheduled_lr(0, total, cfg) == pytest.approx(0.1)
    assert scheduled_lr(9, total, cfg) == pytest.approx(1.0)
    assert scheduled_lr(10, total, cfg) == pytest.approx(1.0)
    assert scheduled_lr(55, total, cfg) == pytest.approx(0.5)
    assert scheduled_lr(100, total, cfg) == pytest.approx(0.0, abs=1e-12)
    lrs = [scheduled_lr(s, total, cfg) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    constant = TrainConfig(learning_rate=0.3, schedule="constant")
    assert scheduled_lr(57, total, constant) == 0.3


def test_adam_step_matches_bias_corrected_update():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64, requires_grad=True)
    grad = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    p.grad = grad.clone()
    optimizer = torch.optim.Adam([p], lr=1.0)
    adam_step({"p": p}, optimizer, lr=0.1)
    # first step: m_hat = g and v_hat = g^2
    expected = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64) - 0.1 * grad / (grad.abs() + 1e-8)
    torch.testing.assert_close(p.detach(), expected)


def test_adam_step_clips_and_rejects_non_finite():
    p = torch.zeros(4, requires_grad=True)
    p.grad = torch.full((4,), 100.0)
    optimizer = torch.optim.Adam([p], lr=0.1)
    adam_step({"p": p}, optimizer, lr=0.1, grad_clip_norm=1.0)
    assert p.grad.norm().item() == pytest.approx(1.0, rel=1e-5)

    q = torch.zeros(2, requires_grad=True)
    q.grad = torch.tensor([1.0, float("inf")])
    with pytest.raises(NumericFailureError) as info:
        adam_step({"q": q}, torch.optim.Adam([q]), lr=0.1)
    assert info.value.tensor == "q"
    assert torch.equal(q.detach(), torch.zeros(2))


def test_train_is_deterministic(toy_dataset, tiny_model_cfg):
    a = train(tiny_model_cfg, toy_dataset, _quick())
    b = train(tiny_model_cfg, toy_dataset, _quick())
    assert _same_weights(a.model, b.model)
    assert a.history == b.history
    assert a.epoch == 2
    assert a.global_step == 4
    c = train(tiny_model_cfg, toy_dataset, _quick(seed=4))
    assert not _same_weights(a.model, c.model)


def test_train_writes_checkpoints_and_metrics(tmp_path, toy_dataset, tiny_model_cfg):
    ckpt = train(tiny_model_cfg, toy_dataset, _quick(), out_dir=tmp_path)
    assert (tmp_path / "best" / config.STATE_FILE).exists()
    assert (tmp_path / "last" / config.WEIGHTS_FILE).exists()
    lines = (tmp_path / config.METRICS_LOG_FILE).read_text().splitlines()
    assert len(lines) == 2
    assert all(math.isfinite(record["val_loss"]) for record in ckpt.history)
    loaded = load_checkpoint(tmp_path / "last")
    assert _same_weights(loaded.model, ckpt.model)
    assert loaded.train_cfg == ckpt.train_cfg
    assert loaded.epoch == 2
    assert loaded.history == ckpt.history


def test_resume_after_interruption_is_bitwise_identical(tmp_path, toy_dataset, tiny_model_cfg):
    cfg = _quick(epochs=3)
    straight = train(tiny_model_cfg, toy_dataset, cfg, out_dir=tmp_path / "straight")
    train(tiny_model_cfg, toy_dataset, cfg, out_dir=tmp_path / "resumed", until_epoch=1)
    resumed = train(tiny_model_cfg, toy_dataset, cfg, out_dir=tmp_path / "resumed")
    assert resumed.epoch == 3
    assert _same_weights(straight.model, resumed.model)
    assert [r["train_loss"] for r in straight.history] == [r["train_loss"] for r in resumed.history]


def test_resume_with_other_config_is_rejected(tmp_path, toy_dataset, tiny_model_cfg):
    train(tiny_model_cfg, toy_dataset, _quick(epochs=1), out_dir=tmp_path)
    with pytest.raises(InvalidArgumentError):
        train(tiny_model_cfg, toy_dataset, _quick(epochs=1, learning_rate=5e-4), out_dir=tmp_path)


def test_fine_tune_copies_model_and_records_steps(tmp_path, toy_dataset, tiny_model_cfg):
    base = train(tiny_model_cfg, toy_dataset, _quick(epochs=1))
    before = {k: v.clone() for k, v in base.model.state_dict().items()}
    tuned = fine_tune(base, toy_dataset, 2, FineTuneConfig(epochs=1, batch_size=4, max_train_samples=4,
                                                           max_val_samples=4), out_dir=tmp_path)
    assert tuned.train_cfg.n_steps == 2
    assert tuned.global_step == 1
    assert all(torch.equal(before[k], v) for k, v in base.model.state_dict().items())
    assert not _same_weights(base.model, tuned.model)
    loaded = load_checkpoint(tmp_path / "last")
    assert isinstance(loaded.train_cfg, FineTuneConfig)
    assert loaded.train_cfg.n_steps == 2


def test_evaluate_loss_rejects_too_short_split(toy_dataset, tiny_model_cfg):
    ckpt = train(tiny_model_cfg, toy_dataset, _quick(epochs=0))
    weights = build_loss_weights(toy_dataset.schema, toy_dataset.grid)
    cfg = _quick(n_steps=12)
    with pytest.raises(InvalidArgumentError):
        evaluate_loss(ckpt.model, toy_dataset, cfg, weights, toy_dataset.stats)
    loss = evaluate_loss(ckpt.model, toy_dataset, _quick(), weights, toy_dataset.stats)
    assert math.isfinite(loss) and loss > 0


@pytest.mark.parametrize("n_steps,tolerance", [(1, 2e-3), (2, 5e-3)])
def test_gradient_check_passes(n_steps, tolerance):
    report = gradient_check(n_steps=n_steps, n_coords=12, seed=1)
    assert report.passed(tolerance), report.per_tensor
    assert report.n_steps == n_steps
    assert "head.weight" in report.per_tensor
    assert report.to_dict()["n_coords"] == report.n_coords


def test_activation_memory_grows_with_unrolled_steps(tiny_model_cfg):
    grid = make_grid(8, 16)
    plain = measure_activation_memory(tiny_model_cfg, grid, [1, 2, 4])
    assert plain[1] < plain[2] < plain[4]
    recomputed = measure_activation_memory(tiny_model_cfg, grid, [4], checkpointing=True)
    assert recomputed[4] < plain[4]


def test_adam_step_decreases_a_scalar_quadratic():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([x], lr=0.01)
    values = [x.item() ** 2]
    for _ in range(100):
        optimizer.zero_grad()
        (x ** 2).sum().backward()
        adam_step({"x": x}, optimizer, lr=0.01)
        values.append(x.item() ** 2)
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 0.5 * values[0]


def test_zero_learning_rate_keeps_initial_weights(toy_dataset, tiny_model_cfg):
    ckpt = train(tiny_model_cfg, toy_dataset, _quick(learning_rate=0.0, epochs=1))
    initial = init_parameters(tiny_model_cfg.for_schema(toy_dataset.schema), toy_dataset.grid, seed=3)
    assert ckpt.global_step > 0
    assert _same_weights(ckpt.model, initial)


def test_finite_differences_are_exact_for_a_linear_model():
    generator = torch.Generator().manual_seed(5)
    inputs = torch.randn(32, 6, generator=generator, dtype=torch.float64)
    targets = torch.randn(32, 3, generator=generator, dtype=torch.float64)
    weight = torch.randn(3, 6, generator=generator, dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(3, dtype=torch.float64, requires_grad=True)

    def loss():
        return ((inputs @ weight.T + bias - targets) ** 2).mean()

    report = finite_difference_check(loss, [("weight", weight), ("bias", bias)], n_coords=50, h=1e-3)
    assert report.n_coords == 18 + 3
    assert report.passed(1e-8), report.per_tensor


def test_truncated_checkpoint_is_a_checksum_failure(tmp_path, toy_dataset, tiny_model_cfg):
    train(tiny_model_cfg, toy_dataset, _quick(epochs=1), out_dir=tmp_path)
    weights = tmp_path / "last" / config.WEIGHTS_FILE
    weights.write_bytes(weights.read_bytes()[:-16])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "last")
    optimizer = tmp_path / "best" / config.OPTIMIZER_FILE
    raw = bytearray(optimizer.read_bytes())
    raw[0] ^= 0xFF
    optimizer.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "best")
