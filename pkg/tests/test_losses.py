import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from retr3d.losses import LossConfig, ce_loss, dice_loss, voxel_loss


def central_difference(f, x, h=1e-5):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def test_dice_examples():
    y = torch.zeros(4, 4, 4, dtype=torch.float64)
    y[:2] = 1
    assert dice_loss(y.clone(), y).item() == pytest.approx(0.0, abs=1e-9)
    assert dice_loss(1 - y, y).item() == pytest.approx(1.0, abs=1e-9)
    p = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert dice_loss(p, torch.tensor([[1.0, 0.0]], dtype=torch.float64)).item() == pytest.approx(0.5, abs=1e-9)


def test_constant_corner_cases_are_finite():
    ones = torch.ones(4, 4, 4, dtype=torch.float64)
    for p, y in ((ones, ones), (ones * 0, ones * 0), (ones, ones * 0)):
        assert math.isfinite(dice_loss(p, y).item())


def test_ce_example():
    p = torch.tensor([[0.9, 0.2]], dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert ce_loss(p, y).item() == pytest.approx(expected, abs=1e-12)
    assert ce_loss(p, y).item() == pytest.approx(0.1643, abs=1e-4)
    half = torch.full((3, 3, 3), 0.5, dtype=torch.float64)
    assert ce_loss(half, (half > 0.4).double()).item() == pytest.approx(math.log(2), abs=1e-12)
    y = (torch.arange(8.0).reshape(2, 2, 2) % 2).double()
    assert ce_loss(y, y).item() == pytest.approx(-math.log1p(-1e-6), rel=1e-6)


def test_ce_is_finite_at_saturation():
    p = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    v = ce_loss(p, y).item()
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-6), rel=1e-6)


@pytest.mark.parametrize("loss", [dice_loss, ce_loss])
def test_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = torch.from_numpy(rng.uniform(0.05, 0.95, (6, 6, 6)))
        y = torch.from_numpy((rng.random((6, 6, 6)) < 0.5).astype(np.float64))
        x = p.clone().requires_grad_(True)
        loss(x, y).backward()
        fd = central_difference(lambda q: loss(q, y), p.clone())
        rel = (x.grad - fd).abs().max() / fd.abs().max()
        assert rel < 1e-4


def test_batch_reduction_is_mean_of_samples():
    rng = np.random.default_rng(3)
    p = torch.from_numpy(rng.random((3, 4, 4, 4)))
    y = torch.from_numpy((rng.random((3, 4, 4, 4)) < 0.5).astype(np.float64))
    for loss in (dice_loss, ce_loss):
        each = torch.stack([loss(p[i], y[i]) for i in range(3)]).mean()
        assert loss(p, y).item() == pytest.approx(each.item(), abs=1e-12)


def test_config_dispatch_and_validation():
    p = torch.full((2, 2, 2), 0.3, dtype=torch.float64)
    y = torch.ones(2, 2, 2, dtype=torch.float64)
    assert voxel_loss(p, y, LossConfig("dice")) == dice_loss(p, y)
    assert voxel_loss(p, y, LossConfig("cross_entropy")) == ce_loss(p, y)
    with pytest.raises(ValueError):
        LossConfig("focal")
    with pytest.raises(ValueError):
        LossConfig("dice", 0.0)
    with pytest.raises(ValueError):
        dice_loss(p, y[:1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds_and_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = torch.from_numpy(rng.random((5, 5, 5)))
    y = torch.from_numpy((rng.random((5, 5, 5)) < rng.random()).astype(np.float64))
    perm = torch.from_numpy(rng.permutation(125))
    pp, yp = p.flatten()[perm].reshape(5, 5, 5), y.flatten()[perm].reshape(5, 5, 5)
    d = dice_loss(p, y).item()
    assert 0.0 <= d <= 1.0
    assert ce_loss(p, y).item() >= 0.0
    assert dice_loss(pp, yp).item() == d
    assert ce_loss(pp, yp).item() == ce_loss(p, y).item()
