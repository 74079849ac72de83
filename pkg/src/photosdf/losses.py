"""Image and regularization losses for surface-rendering training."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .field import DTYPE, Field, eval_sdf

BINOMIAL_5 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=DTYPE) / 16.0


def tone_map(img: torch.Tensor, max_value: float = 4.0, gamma: float = 2.2, floor: float = 1e-6) -> torch.Tensor:
    """Clamp linear radiance to [0, max_value], then apply gamma 1/gamma.

    ``floor`` keeps the power law differentiable at zero.
    """
    return torch.clamp(img, min=floor, max=max_value) ** (1.0 / gamma)


def _to_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    return img.permute(2, 0, 1)[None]


def gaussian_blur(x: torch.Tensor) -> torch.Tensor:
    """Separable 5-tap binomial blur on NCHW, reflect padding."""
    c = x.shape[1]
    k = BINOMIAL_5.to(x.dtype)
    x = F.pad(x, (2, 2, 0, 0), mode="reflect") if x.shape[-1] > 2 else F.pad(x, (2, 2, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    x = F.pad(x, (0, 0, 2, 2), mode="reflect") if x.shape[-2] > 2 else F.pad(x, (0, 0, 2, 2), mode="replicate")
    return F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)


def pyramid_l2(pred: torch.Tensor, target: torch.Tensor, levels: int = 4, blur: bool = True) -> torch.Tensor:
    """Sum over pyramid levels of the mean squared difference.

    Level 0 is the input; each further level is blurred and downsampled 2x.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if min(pred.shape[0], pred.shape[1]) < 2 ** (levels - 1):
        raise ValueError(f"patch {tuple(pred.shape[:2])} too small for {levels} pyramid levels")
    a, b = _to_nchw(pred), _to_nchw(target)
    total = pred.new_zeros(())
    for level in range(levels):
        if level:
            a = gaussian_blur(a)[..., ::2, ::2] if blur else a[..., ::2, ::2]
            b = gaussian_blur(b)[..., ::2, ::2] if blur else b[..., ::2, ::2]
        total = total + ((a - b) ** 2).mean()
    return total


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(pred: torch.Tensor, target: torch.Tensor, data_range: float = 1.0, size: int = 11, sigma: float = 1.5):
    """Mean SSIM over valid 11x11 Gaussian windows and channels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    a, b = _to_nchw(pred), _to_nchw(target)
    c = a.shape[1]
    g = _gaussian_window(size, sigma).to(a.dtype)
    kx = g.view(1, 1, 1, size).expand(c, 1, 1, size)
    ky = g.view(1, 1, size, 1).expand(c, 1, size, 1)

    def filt(x):
        return F.conv2d(F.conv2d(x, kx, groups=c), ky, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return s.mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    return 1.0 - ssim(pred, target, data_range)


def eikonal_loss(field: Field, points: torch.Tensor) -> torch.Tensor:
    """Mean of (|grad S| - 1)^2, differentiable w.r.t. the field."""
    _, _, g = eval_sdf(field, points, create_graph=True)
    return ((torch.linalg.norm(g, dim=-1) - 1.0) ** 2).mean()


def roughness_range_loss(roughness: torch.Tensor) -> torch.Tensor:
    """Mean hinge penalty on roughness above 0.5."""
    return torch.clamp(roughness - 0.5, min=0.0).mean()


def field_roughness_loss(field: Field, points: torch.Tensor) -> torch.Tensor:
    S, f, g = eval_sdf(field, points, create_graph=True)
    n = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
    return roughness_range_loss(field.materials(points, n, f)[2])


@dataclass
class LossBreakdown:
    pyramid_l2: torch.Tensor
    ssim_term: torch.Tensor
    eikonal: torch.Tensor
    roughness_range: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("pyramid_l2", "ssim_term", "eikonal", "roughness_range", "total")}
