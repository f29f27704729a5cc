import numpy as np
import pytest
import torch

from core.errors import InvalidArgumentError, NumericFailureError
from core.grid import latitude_weights, make_grid
from core.loss import (
    Batch,
    LossWeights,
    build_loss_weights,
    channel_weights,
    level_weights,
    multi_step_loss,
    prediction_target,
    reconstruct_next,
    weighted_mse,
)
from core.model import ModelConfig, init_parameters
from core.schema import NormStats, era5_schema, toy_schema


def _stats(n, seed=0):
    rng = np.random.default_rng(seed)
    return NormStats(mean=rng.normal(size=n), std=1 + rng.random(n), diff_std=0.1 + rng.random(n))


def test_level_weights_proportional_to_pressure():
    weights = level_weights([50, 500, 1000])
    assert weights.sum() == pytest.approx(1.0)
    assert weights[0] / weights[2] == pytest.approx(1 / 20)


def test_channel_weights_mean_one_and_surface_emphasis():
    schema = era5_schema()
    weights = channel_weights(schema)
    assert weights.mean() == pytest.approx(1.0)
    labels = [c.label for c in schema.prognostic]
    assert weights[labels.index("t2m")] == pytest.approx(10 * weights[labels.index("u10")])
    assert weights[labels.index("z1000")] == pytest.approx(20 * weights[labels.index("z50")])
    np.testing.assert_array_equal(channel_weights(schema, enabled=False), np.ones(73))
    custom = channel_weights(schema, {"msl": 1.0})
    assert custom[labels.index("msl")] == pytest.approx(custom[labels.index("t2m")])
    with pytest.raises(InvalidArgumentError):
        channel_weights(schema, {"z500": 1.0})


def test_build_loss_weights_switches():
    schema, grid = toy_schema(4), make_grid(6, 8)
    off = build_loss_weights(schema, grid, lat_weighting=False, channel_weighting=False)
    assert off.is_uniform
    on = build_loss_weights(schema, grid, lat_weighting=True, channel_weighting=True)
    np.testing.assert_allclose(on.latitude, latitude_weights(grid))
    assert on.channel.mean() == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        LossWeights(channel=np.array([1.0, -1.0]), latitude=np.ones(6))


def test_weighted_mse_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for case in range(100):
        b, c, h, w = rng.integers(1, 3), rng.integers(1, 5), rng.integers(2, 9), rng.integers(2, 9)
        pred = rng.normal(size=(b, c, h, w))
        target = rng.normal(size=(b, c, h, w))
        weights = LossWeights(channel=rng.random(c) + 0.1, latitude=rng.random(h) + 0.1)
        total = 0.0
        for i in range(b):
            for ci in range(c):
                for y in range(h):
                    for x in range(w):
                        total += weights.channel[ci] * weights.latitude[y] * (pred[i, ci, y, x] - target[i, ci, y, x]) ** 2
        expected = total / pred.size
        got = weighted_mse(torch.from_numpy(pred), torch.from_numpy(target), weights).item()
        assert got == pytest.approx(expected, rel=1e-6), case


def test_weighted_mse_uniform_and_shape_errors():
    pred, target = torch.ones(1, 2, 3, 4), torch.zeros(1, 2, 3, 4)
    assert weighted_mse(pred, target).item() == 1.0
    assert weighted_mse(pred, target, LossWeights.uniform(2, 3)).item() == 1.0
    assert weighted_mse(pred, target, LossWeights.uniform(2, 3).scaled(2.0)).item() == 2.0
    with pytest.raises(InvalidArgumentError):
        weighted_mse(pred, torch.zeros(1, 2, 3, 5))
    with pytest.raises(InvalidArgumentError):
        weighted_mse(pred, target, LossWeights(channel=np.ones(3) * 2, latitude=np.ones(3)))


def test_prediction_target_modes():
    stats = _stats(2)
    x_t = torch.randn(2, 4, 5, dtype=torch.float64)
    x_next = torch.randn(2, 4, 5, dtype=torch.float64)
    mean = torch.from_numpy(stats.mean).view(-1, 1, 1)
    std = torch.from_numpy(stats.std).view(-1, 1, 1)
    diff_std = torch.from_numpy(stats.diff_std).view(-1, 1, 1)
    torch.testing.assert_close(prediction_target(x_t, x_next, "direct", stats), (x_next - mean) / std)
    torch.testing.assert_close(prediction_target(x_t, x_next, "residual", stats), (x_next - x_t) / diff_std)
    # the normalized-state form gives the same residual target
    z_t, z_next = (x_t - mean) / std, (x_next - mean) / std
    torch.testing.assert_close(
        prediction_target(z_t, z_next, "residual", stats, normalized=True), (x_next - x_t) / diff_std
    )
    with pytest.raises(InvalidArgumentError):
        prediction_target(x_t, x_next, "delta", stats)
    with pytest.raises(InvalidArgumentError):
        prediction_target(x_t, x_next[:1], "direct", stats)


def test_reconstruct_inverts_target():
    stats = _stats(3, seed=4)
    z_t, z_next = torch.randn(3, 4, 4, dtype=torch.float64), torch.randn(3, 4, 4, dtype=torch.float64)
    for mode in ("direct", "residual"):
        target = prediction_target(z_t, z_next, mode, stats, normalized=True)
        torch.testing.assert_close(reconstruct_next(z_t, target, mode, stats), z_next)


def _batch(n_steps, n_prog=3, n_static=3, h=8, w=16, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return Batch(
        inputs=torch.randn(2, n_prog + n_static, h, w, generator=generator),
        targets=torch.randn(2, n_steps, n_prog, h, w, generator=generator),
        statics=torch.randn(2, n_steps + 1, n_static, h, w, generator=generator),
    )


def test_multi_step_loss_is_mean_of_steps(tiny_model_cfg, small_grid):
    model = init_parameters(tiny_model_cfg, small_grid, seed=0).eval()
    stats = NormStats.identity(3)
    batch = _batch(3)
    loss = multi_step_loss(model, batch, None, stats)
    # zero head: every step predicts persistence of the input state
    state = batch.inputs[:, :3]
    expected = torch.stack([((batch.targets[:, k] - state) ** 2).mean() for k in range(3)]).mean()
    torch.testing.assert_close(loss, expected)
    one = multi_step_loss(model, batch, None, stats, n_steps=1)
    torch.testing.assert_close(one, ((batch.targets[:, 0] - state) ** 2).mean())
    with pytest.raises(InvalidArgumentError):
        multi_step_loss(model, batch, None, stats, n_steps=4)


def test_multi_step_loss_feeds_back_own_prediction(small_grid):
    cfg = ModelConfig(embed_dim=16, depth=2, patch_size=2, n_heads=2, window=(2, 4), drop_path_rate=0.0,
                      in_channels=6, out_channels=3, prediction_mode="direct")
    model = init_parameters(cfg, small_grid, seed=1).eval()
    with torch.no_grad():
        model.head.bias.fill_(0.5)
    batch = _batch(2)
    loss = multi_step_loss(model, batch, None, NormStats.identity(3))
    # direct mode with a constant output: both steps predict 0.5 everywhere
    expected = torch.stack([((batch.targets[:, k] - 0.5) ** 2).mean() for k in range(2)]).mean()
    torch.testing.assert_close(loss, expected)


def test_detach_between_steps_cuts_gradient_chain(tiny_model_cfg, small_grid):
    model = init_parameters(tiny_model_cfg, small_grid, seed=0)
    with torch.no_grad():
        model.head.weight.normal_(0, 0.02, generator=torch.Generator().manual_seed(0))
    batch = _batch(2)
    batch.inputs.requires_grad_(True)
    multi_step_loss(model.eval(), batch, None, NormStats.identity(3), detach_between_steps=True).backward()
    detached = batch.inputs.grad.clone()
    batch.inputs.grad = None
    multi_step_loss(model, batch, None, NormStats.identity(3)).backward()
    assert not torch.allclose(detached, batch.inputs.grad)


def test_multi_step_loss_reports_step_of_failure(tiny_model_cfg, small_grid):
    model = init_parameters(tiny_model_cfg, small_grid, seed=0).eval()
    batch = _batch(2)
    batch.targets[:, 1, 0, 0, 0] = float("nan")
    with pytest.raises(NumericFailureError) as info:
        multi_step_loss(model, batch, None, NormStats.identity(3))
    assert info.value.step == 1
