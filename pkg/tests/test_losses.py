import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import convolve1d
from skimage.metrics import structural_similarity

from photosdf.field import DTYPE, AnalyticField, FieldStack, Sphere, Torus
from photosdf.losses import (
    eikonal_loss,
    field_roughness_loss,
    pyramid_l2,
    roughness_range_loss,
    ssim,
    ssim_loss,
    tone_map,
)
from photosdf.optim import Adam


def _rand(shape, seed):
    return torch.rand(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


def _reference_pyramid(a, b, levels):
    k = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16
    total = 0.0
    for level in range(levels):
        if level:
            a = convolve1d(convolve1d(a, k, axis=0, mode="mirror"), k, axis=1, mode="mirror")[::2, ::2]
            b = convolve1d(convolve1d(b, k, axis=0, mode="mirror"), k, axis=1, mode="mirror")[::2, ::2]
        total += np.mean((a - b) ** 2)
    return total


# pyramid


def test_pyramid_identity():
    a = _rand((16, 16, 3), 0)
    assert float(pyramid_l2(a, a.clone(), 4)) == 0.0


def test_pyramid_constant_offset():
    a = _rand((8, 8, 3), 1)
    assert float(pyramid_l2(a + 0.1, a, 1, blur=False)) == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("shape", [(32, 32, 3), (24, 40, 3), (16, 16, 1)])
def test_pyramid_matches_reference(shape):
    a, b = _rand(shape, 2), _rand(shape, 3)
    got = float(pyramid_l2(a, b, 4))
    ref = _reference_pyramid(a.numpy(), b.numpy(), 4)
    assert got == pytest.approx(ref, abs=1e-10)


def test_pyramid_rejects_small_patch():
    with pytest.raises(ValueError):
        pyramid_l2(_rand((4, 4, 3), 0), _rand((4, 4, 3), 1), 4)
    with pytest.raises(ValueError):
        pyramid_l2(_rand((8, 8, 3), 0), _rand((8, 9, 3), 1), 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_pyramid_nonnegative_and_monotone_in_offset(seed, c):
    a = _rand((16, 16, 3), seed)
    small = float(pyramid_l2(a + c / 2, a, 4))
    big = float(pyramid_l2(a + c, a, 4))
    assert 0 <= small < big


# SSIM


def test_ssim_identity():
    a = _rand((20, 20, 3), 4)
    assert float(ssim_loss(a, a.clone())) == pytest.approx(0.0, abs=1e-12)


def test_ssim_matches_skimage():
    a, b = _rand((32, 32, 3), 5), _rand((32, 32, 3), 6)
    b = 0.7 * a + 0.3 * b
    ref = structural_similarity(
        a.numpy(), b.numpy(), data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert float(ssim(a, b)) == pytest.approx(ref, abs=1e-10)


def test_ssim_checkerboard_inverse():
    yy, xx = np.mgrid[:32, :32]
    board = torch.tensor(((xx + yy) % 2).astype(np.float64))
    loss = float(ssim_loss(board, 1.0 - board))
    assert 1.8 < loss <= 2.0


def test_ssim_continuity_for_small_noise():
    base = torch.full((24, 24), 0.5, dtype=DTYPE)
    losses = [float(ssim_loss(base + s * _rand((24, 24), 7), base)) for s in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert losses == sorted(losses, reverse=True)
    assert losses[-1] < 1e-4


def test_tone_map_clamps():
    x = torch.tensor([-1.0, 0.0, 1.0, 10.0], dtype=DTYPE)
    y = tone_map(x, 4.0, 2.2)
    assert y[2] == 1.0
    assert float(y[3]) == pytest.approx(4.0 ** (1 / 2.2))
    assert float(y[0]) == float(y[1]) > 0


# eikonal


def _ball_points(n, seed):
    g = torch.Generator().manual_seed(seed)
    d = torch.randn(n, 3, dtype=DTYPE, generator=g)
    return d / torch.linalg.norm(d, dim=-1, keepdim=True) * torch.rand(n, 1, dtype=DTYPE, generator=g).clamp_min(0.05)


def test_eikonal_zero_on_true_sdf(unit_sphere):
    assert float(eikonal_loss(unit_sphere, _ball_points(256, 0)).detach()) == pytest.approx(0.0, abs=1e-12)


def test_eikonal_one_on_doubled_sdf():
    f = AnalyticField(Sphere(1.0), scale=2.0)
    assert float(eikonal_loss(f, _ball_points(256, 1)).detach()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi))
def test_eikonal_rotation_invariant(angle):
    f = AnalyticField(Torus(0.6, 0.25), scale=1.7)
    pts = _ball_points(64, 2)
    c, s = math.cos(angle), math.sin(angle)
    R = torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    assert float(eikonal_loss(f, pts @ R.T).detach()) == pytest.approx(float(eikonal_loss(f, pts).detach()), abs=1e-12)


def test_eikonal_decreases_under_regularization(cfg):
    stack = FieldStack(cfg.field, seed=0)
    pts = _ball_points(256, 3)
    theta = stack.params.clone()
    opt = Adam(theta.numel())
    start = None
    for _ in range(100):
        p = theta.clone().requires_grad_(True)
        loss = eikonal_loss(stack.with_params(p), pts)
        start = float(loss.detach()) if start is None else start
        (g,) = torch.autograd.grad(loss, p)
        theta = opt.step(theta, g, 1e-3)
    end = float(eikonal_loss(stack.with_params(theta), pts).detach())
    assert math.isfinite(start) and start > 0
    assert end < 0.5 * start


# roughness hinge


@pytest.mark.parametrize("values,expected", [([0.3, 0.3], 0.0), ([0.7, 0.7], 0.2), ([0.4, 0.6], 0.05)])
def test_roughness_hinge(values, expected):
    assert float(roughness_range_loss(torch.tensor(values, dtype=DTYPE))) == pytest.approx(expected, abs=1e-15)


def test_field_roughness_uses_material_roughness():
    from photosdf.field import ConstantMaterial

    f = AnalyticField(Sphere(0.5), ConstantMaterial(roughness=0.7))
    assert float(field_roughness_loss(f, _ball_points(16, 4))) == pytest.approx(0.2, abs=1e-15)
