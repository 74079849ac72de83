"""Stage 1: volume rendering of the SDF to recover topology.

Opacity between consecutive samples comes from the drop of a logistic CDF
of the signed distance; the diffuse net acts as the radiance field with the
view direction substituted by -d.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .config import Config
from .field import DTYPE, Field, FieldStack, eval_sdf
from .io import Dataset
from .optim import Adam, TrainingDiverged, cosine_lr
from .tracer import clip_to_sphere

log = logging.getLogger(__name__)

CDF_EPS = 1e-5


@dataclass
class RaySamples:
    t: torch.Tensor  # (R, N) strictly increasing depths
    S: torch.Tensor  # (R, N)
    alpha: torch.Tensor  # (R, N)
    weights: torch.Tensor  # (R, N)
    radiance: torch.Tensor  # (R, N, 3)
    grad: torch.Tensor  # (R, N, 3) spatial SDF gradient (differentiable)


def logistic_cdf(S: torch.Tensor, s) -> torch.Tensor:
    return torch.sigmoid(s * S)


def opacity(S: torch.Tensor, s) -> torch.Tensor:
    """a_i = clamp((Phi(S_i) - Phi(S_{i+1})) / Phi(S_i), 0, 1); the last sample gets 0."""
    phi = logistic_cdf(S, s)
    a = (phi[..., :-1] - phi[..., 1:] + CDF_EPS) / (phi[..., :-1] + CDF_EPS)
    a = torch.clamp(a, 0.0, 1.0)
    return torch.cat([a, torch.zeros_like(a[..., :1])], dim=-1)


def composite(alpha: torch.Tensor) -> torch.Tensor:
    """w_i = a_i prod_{j<i} (1 - a_j)."""
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    return alpha * trans


def radiance(field: Field, x, n, view_dir, f) -> torch.Tensor:
    if isinstance(field, FieldStack):
        return field.diffuse(x, n, view_dir, f)
    return field.materials(x, n, f)[0]


def stratified_depths(near, far, n: int, gen: torch.Generator | None) -> torch.Tensor:
    """n strictly increasing samples per ray, one per equal bin (jittered if gen)."""
    u = torch.rand(near.shape[0], n, dtype=DTYPE, generator=gen) if gen is not None else torch.full((near.shape[0], n), 0.5, dtype=DTYPE)
    bins = (torch.arange(n, dtype=DTYPE) + u) / n
    return near[:, None] + (far - near)[:, None] * bins


def importance_depths(t: torch.Tensor, weights: torch.Tensor, n: int, gen: torch.Generator | None) -> torch.Tensor:
    """Inverse-CDF samples from the piecewise-constant weight distribution."""
    w = weights.detach()[:, :-1] + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    u = torch.rand(t.shape[0], n, dtype=DTYPE, generator=gen) if gen is not None else torch.linspace(0, 1, n, dtype=DTYPE).expand(t.shape[0], n)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, cdf.shape[1] - 1)
    c0, c1 = torch.gather(cdf, 1, idx - 1), torch.gather(cdf, 1, idx)
    t0, t1 = torch.gather(t, 1, idx - 1), torch.gather(t, 1, idx)
    frac = (u - c0) / (c1 - c0).clamp_min(1e-12)
    return t0 + frac * (t1 - t0)


def _evaluate(field: Field, origins, dirs, t, s, create_graph: bool) -> RaySamples:
    R, N = t.shape
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    S, f, g = eval_sdf(field, x.reshape(-1, 3), create_graph=create_graph)
    n = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
    view = (-dirs)[:, None, :].expand(R, N, 3).reshape(-1, 3)
    c = radiance(field, x.reshape(-1, 3), n, view, f).reshape(R, N, 3)
    S = S.reshape(R, N)
    a = opacity(S, s)
    return RaySamples(t, S, a, composite(a), c, g.reshape(R, N, 3))


def volume_render(
    field: Field,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    sharpness,
    n_samples: int = 64,
    n_importance: int = 0,
    scene_radius: float = 1.0,
    gen: torch.Generator | None = None,
    create_graph: bool = False,
):
    """Returns (color (R, 3), opacity (R,), depth (R,), samples).

    Rays missing the scene bound get zero color and opacity.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    s = torch.as_tensor(sharpness, dtype=DTYPE)
    if not bool(s > 0):
        raise ValueError("sharpness must be positive")
    near, far, valid = clip_to_sphere(origins, dirs, scene_radius)
    far = torch.where(valid, far, near + 1.0)
    t = stratified_depths(near, far, n_samples, gen)
    if n_importance > 0:
        with torch.no_grad():
            coarse = _evaluate(field, origins, dirs, t, s, create_graph=False)
        t = torch.sort(torch.cat([t, importance_depths(t, coarse.weights, n_importance, gen)], -1), -1).values
    samples = _evaluate(field, origins, dirs, t, s, create_graph)
    w = samples.weights * valid[:, None]
    color = (w[..., None] * samples.radiance).sum(1)
    return color, w.sum(1), (w * t).sum(1), samples


# --------------------------------------------------------------------------
# stage-1 fitting


def _pixel_batch(dataset: Dataset, views: list[int], n: int, gen: torch.Generator):
    """Random pixels over the given views: (origins, dirs, target colors)."""
    cam0 = dataset.views[0].camera
    W, H = cam0.width, cam0.height
    vi = torch.randint(len(views), (n,), generator=gen)
    px = torch.randint(W * H, (n,), generator=gen)
    origins, dirs, target = [], [], []
    for k in vi.unique().tolist():
        sel = px[vi == k]
        view = dataset.views[views[k]]
        uv = torch.stack([(sel % W).to(DTYPE) + 0.5, (sel // W).to(DTYPE) + 0.5], dim=-1)
        o, d = view.camera.rays(uv)
        origins.append(o)
        dirs.append(d)
        target.append(view.image.reshape(-1, 3)[sel])
    return torch.cat(origins), torch.cat(dirs), torch.cat(target)


def stage1_fit(
    field: FieldStack,
    dataset: Dataset,
    cfg: Config,
    iters: int | None = None,
    views: list[int] | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    sharpness: float | None = None,
) -> tuple[FieldStack, float]:
    """Fit SDF + radiance nets to the images with volume rendering.

    Only the SDF and diffuse blocks move; specular, roughness and light are
    left for stage 2. Returns the updated field and the final sharpness.
    On a non-finite loss the last good parameters are checkpointed (when
    ``out_dir`` is given) and :class:`TrainingDiverged` is raised.
    ``sharpness`` resumes from a previous fit instead of the configured init.
    """
    vc, tc = cfg.volume, cfg.train
    iters = tc.iters_stage1 if iters is None else iters
    views = list(range(len(dataset))) if views is None else views
    gen = torch.Generator().manual_seed(tc.seed if seed is None else seed)
    sl = field.slices()
    mask = torch.zeros(field.params.numel() + 1, dtype=DTYPE)  # last slot: log sharpness
    mask[sl["sdf"]] = vc.lr
    mask[sl["diffuse"]] = vc.lr
    mask[-1] = vc.lr_sharpness
    theta = torch.cat([field.params.detach(), torch.tensor([math.log(sharpness or vc.init_sharpness)], dtype=DTYPE)])
    opt = Adam(theta.numel())
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = (out_dir / "stage1_metrics.ndjson").open("a")
    try:
        for it in range(iters):
            t0 = time.perf_counter()
            params = theta.clone().requires_grad_(True)
            f = field.with_params(params[:-1])
            o, d, target = _pixel_batch(dataset, views, vc.rays_per_step, gen)
            color, acc, _, samples = volume_render(
                f, o, d, torch.exp(params[-1]), vc.n_samples, vc.n_importance, cfg.trace.scene_radius, gen, True
            )
            l1 = (color - target.clamp(0.0, 1.0)).abs().mean()
            eik = ((torch.linalg.norm(samples.grad, dim=-1) - 1.0) ** 2).mean()
            loss = l1 + vc.lambda_eikonal * eik
            if vc.lambda_mask > 0:
                # a collocated light leaves no visible surface point unlit, so black pixels are background
                inside = (target.sum(-1) > vc.mask_threshold).to(DTYPE)
                loss = loss + vc.lambda_mask * F.binary_cross_entropy(acc.clamp(1e-4, 1 - 1e-4), inside)
            (grad,) = torch.autograd.grad(loss, params)
            if not (torch.isfinite(loss) and bool(torch.isfinite(grad).all())):
                if out_dir is not None:
                    save_checkpoint(out_dir / "stage1_last_good.ckpt", field.with_params(theta[:-1].clone()), {"log_sharpness": theta[-1:]})
                raise TrainingDiverged(f"stage 1: non-finite loss at iter {it}")
            lr = mask * cosine_lr(1.0, it, iters, tc.lr_min_ratio)
            theta = opt.step(theta, grad, lr)
            if metrics is not None and ((tc.log_every and it % tc.log_every == 0) or it == iters - 1):
                rec = {"iter": it, "l1": float(l1.detach()), "eikonal": float(eik.detach()), "sharpness": math.exp(float(theta[-1])),
                       "wall_ms": 1e3 * (time.perf_counter() - t0)}
                metrics.write(json.dumps(rec) + "\n")
            if out_dir is not None and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_dir / "stage1.ckpt", field.with_params(theta[:-1].clone()), {"log_sharpness": theta[-1:]})
    finally:
        if metrics is not None:
            metrics.close()
    fitted = field.with_params(theta[:-1].detach().clone())
    if out_dir is not None:
        save_checkpoint(out_dir / "stage1.ckpt", fitted, {"log_sharpness": theta[-1:]})
    return fitted, float(torch.exp(theta[-1]))
