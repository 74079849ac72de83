"""Stage-2 training: edge-aware surface rendering with image + regularizer losses."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import Camera
from .checkpoint import save_checkpoint
from .config import Config
from .edges import reparam_interior
from .field import DTYPE, Field, FieldStack
from .io import Dataset
from .losses import LossBreakdown, eikonal_loss, field_roughness_loss, pyramid_l2, ssim_loss, tone_map
from .optim import Adam, TrainingDiverged, cosine_lr
from .shade import MISS, RenderPlan, evaluate_plan, plan_render, shade_points

log = logging.getLogger(__name__)

SURFACE_JITTER = 0.01
BRIGHT_MISS = 0.05  # observed radiance above which a predicted miss still counts


@dataclass
class Batch:
    """Everything frozen for one loss evaluation."""

    plan: RenderPlan
    target: torch.Tensor  # (h, w, 3) linear radiance
    eikonal_points: torch.Tensor  # (E, 3)
    surface_points: torch.Tensor  # (P, 3)


def random_window(camera: Camera, size: int, gen: torch.Generator) -> tuple[int, int, int, int]:
    w, h = min(size, camera.width), min(size, camera.height)
    x0 = int(torch.randint(camera.width - w + 1, (1,), generator=gen))
    y0 = int(torch.randint(camera.height - h + 1, (1,), generator=gen))
    return x0, y0, w, h


def sample_eikonal_points(surface: torch.Tensor, n_uniform: int, n_surface: int, radius: float, gen: torch.Generator):
    """Uniform points in the bounding ball plus jittered copies of surface points."""
    d = torch.randn(n_uniform, 3, dtype=DTYPE, generator=gen)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    r = radius * torch.rand(n_uniform, 1, dtype=DTYPE, generator=gen) ** (1.0 / 3.0)
    pts = [d * r]
    if surface.shape[0] and n_surface:
        idx = torch.randint(surface.shape[0], (n_surface,), generator=gen)
        pts.append(surface[idx] + SURFACE_JITTER * torch.randn(n_surface, 3, dtype=DTYPE, generator=gen))
    return torch.cat(pts)


def make_batch(field: Field, camera: Camera, image: torch.Tensor, cfg: Config, window, gen: torch.Generator) -> Batch:
    plan = plan_render(field, camera, cfg.trace, cfg.edges, edges=cfg.shade.edges, window=window)
    x0, y0, w, h = plan.window
    target = image[y0 : y0 + h, x0 : x0 + w]
    surface = plan.interior_x
    eik = sample_eikonal_points(surface, cfg.train.eikonal_uniform, cfg.train.eikonal_surface, cfg.trace.scene_radius, gen)
    return Batch(plan, target, eik, surface)


def compute_loss(field: Field, batch: Batch, cfg: Config) -> tuple[LossBreakdown, torch.Tensor]:
    """Total loss for a frozen batch; differentiable w.r.t. ``field.params``."""
    tc = cfg.train
    pred, _ = evaluate_plan(field, batch.plan, cfg.shade)
    target = batch.target
    if tc.mask_misses:
        keep = (batch.plan.kind != MISS) | (target.max(dim=-1).values > BRIGHT_MISS)
        pred = torch.where(keep[..., None], pred, target)
    a = tone_map(pred, tc.tone_max, tc.tone_gamma)
    b = tone_map(target, tc.tone_max, tc.tone_gamma)
    pyr = pyramid_l2(a, b, tc.pyramid_levels)
    ss = ssim_loss(a, b, tc.ssim_data_range) if min(a.shape[:2]) >= 11 else a.new_zeros(())
    eik = eikonal_loss(field, batch.eikonal_points)
    if batch.surface_points.shape[0]:
        rough = field_roughness_loss(field, batch.surface_points)
    else:
        rough = a.new_zeros(())
    total = pyr + tc.ssim_weight * ss + tc.lambda_eikonal * eik + tc.lambda_roughness * rough
    return LossBreakdown(pyr, ss, eik, rough, total), pred


def learning_rates(field: FieldStack, cfg: Config, it: int, total: int) -> torch.Tensor:
    tc = cfg.train
    lr = torch.full_like(field.params, tc.lr_fields)
    lr[-1] = tc.lr_light
    return lr * cosine_lr(1.0, it, total, tc.lr_min_ratio)


def init_light_intensity(field: Field, dataset: Dataset, views: list[int], cfg: Config, gen: torch.Generator, n_points: int = 10) -> float:
    """L so that predicted brightness at random interior points matches the images."""
    pred_sum = obs_sum = 0.0
    for vi in views:
        cam = dataset.views[vi].camera
        plan = plan_render(field, cam, cfg.trace, cfg.edges)  # edge-blended pixels are not interior
        if plan.interior_index.numel() == 0:
            continue
        pick = torch.randperm(plan.interior_index.numel(), generator=gen)[:n_points]
        unit = field.with_params(torch.cat([field.params[:-1].detach(), torch.ones(1, dtype=DTYPE)]))
        # same surface-snapped points the renderer shades
        x, _ = reparam_interior(unit, cam.origin, plan.interior_x[pick], plan.interior_n[pick])
        pred = shade_points(unit, cam.origin, x.detach(), cfg.shade).detach()
        obs = dataset.views[vi].image.reshape(-1, 3)[plan.interior_index[pick]]
        pred_sum += float(pred.mean())
        obs_sum += float(obs.mean())
        if pick.numel() >= n_points:
            break
    if pred_sum <= 0:
        return float(field.params[-1])
    return obs_sum / pred_sum


def train_stage2(
    field: FieldStack,
    dataset: Dataset,
    cfg: Config,
    iters: int | None = None,
    views: list[int] | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    init_light: bool = True,
) -> tuple[FieldStack, list[dict]]:
    """Adam on all parameters (four nets + light) with patch-based rendering.

    Writes ``metrics.ndjson`` and periodic ``stage2.ckpt`` when ``out_dir`` is
    set. A non-finite loss or gradient saves ``stage2_last_good.ckpt`` and
    raises :class:`TrainingDiverged`.
    """
    tc = cfg.train
    iters = tc.iters_stage2 if iters is None else iters
    views = list(range(len(dataset))) if views is None else views
    gen = torch.Generator().manual_seed(tc.seed if seed is None else seed)
    theta = field.params.detach().clone()
    if init_light and iters > 0:
        theta[-1] = init_light_intensity(field, dataset, views, cfg, gen)
    opt = Adam(theta.numel())
    records: list[dict] = []
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = (out_dir / "metrics.ndjson").open("a")
    try:
        for it in range(iters):
            t0 = time.perf_counter()
            current = field.with_params(theta)
            vi = views[int(torch.randint(len(views), (1,), generator=gen))]
            view = dataset.views[vi]
            window = random_window(view.camera, tc.patch_size, gen)
            batch = make_batch(current, view.camera, view.image, cfg, window, gen)
            params = theta.clone().requires_grad_(True)
            parts, _ = compute_loss(field.with_params(params), batch, cfg)
            (grad,) = torch.autograd.grad(parts.total, params)
            if not (torch.isfinite(parts.total) and bool(torch.isfinite(grad).all())):
                if out_dir is not None:
                    save_checkpoint(out_dir / "stage2_last_good.ckpt", field.with_params(theta.clone()))
                raise TrainingDiverged(f"stage 2: non-finite loss at iter {it}")
            theta = opt.step(theta, grad, learning_rates(field, cfg, it, iters))
            rec = {"iter": it, **parts.as_floats(), "L": float(theta[-1]), "wall_ms": 1e3 * (time.perf_counter() - t0)}
            records.append(rec)
            if metrics is not None and ((tc.log_every and it % tc.log_every == 0) or it == iters - 1):
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
            if out_dir is not None and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_dir / "stage2.ckpt", field.with_params(theta.clone()))
    finally:
        if metrics is not None:
            metrics.close()
    fitted = field.with_params(theta.detach().clone())
    if out_dir is not None:
        save_checkpoint(out_dir / "stage2.ckpt", fitted)
    return fitted, records


# --------------------------------------------------------------------------
# finite-difference gradient check


def silhouette_window(field: Field, camera: Camera, cfg: Config, size: int) -> tuple[int, int, int, int]:
    """A size x size window centered on an edge pixel (image center if none)."""
    plan = plan_render(field, camera, cfg.trace, cfg.edges, edges=True)
    if len(plan.edges):
        cx, cy = plan.edges.owner[len(plan.edges) // 2].tolist()
    else:
        cx, cy = camera.width // 2, camera.height // 2
    x0 = min(max(cx - size // 2, 0), max(camera.width - size, 0))
    y0 = min(max(cy - size // 2, 0), max(camera.height - size, 0))
    return x0, y0, min(size, camera.width), min(size, camera.height)


@dataclass
class GradCheckReport:
    max_rel_error: float
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    loss: float
    window: tuple[int, int, int, int] = (0, 0, 0, 0)


def gradcheck(
    field: Field,
    camera: Camera,
    image: torch.Tensor,
    cfg: Config,
    window: tuple[int, int, int, int] | None = None,
    n_coords: int = 64,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences of the full loss.

    The render plan and regularizer samples are frozen, so the loss is a
    smooth function of the parameters. Differences use the fourth-order
    central stencil with step ``h``; the second-order one is dominated by
    truncation error for steep softplus nets. The default window is a
    16x16 patch centered on a silhouette pixel. Coordinates are drawn evenly
    from every parameter block (the light intensity is always included).
    The relative error is |a - n| / max(|a|, |n|, floor * max|grad|).
    """
    gen = torch.Generator().manual_seed(seed)
    if window is None:
        window = silhouette_window(field, camera, cfg, 16)
    batch = make_batch(field, camera, image, cfg, window, gen)
    params = field.params.detach().clone().requires_grad_(True)
    parts, _ = compute_loss(field.with_params(params), batch, cfg)
    (grad,) = torch.autograd.grad(parts.total, params)
    grad = grad.detach()
    if hasattr(field, "slices"):
        blocks = [s for k, s in field.slices().items() if k != "light"]
    else:
        blocks = [slice(0, field.params.numel() - 1)]
    per_block = max(1, (n_coords - 1) // max(len(blocks), 1))
    coords = [field.params.numel() - 1]
    rng = np.random.default_rng(seed)
    for s in blocks:
        idx = np.arange(s.start, s.stop)
        if idx.size == 0:
            continue
        # half of the picks by gradient magnitude so the check is not all near-zero coordinates
        mag = grad[s].abs().numpy()
        top = idx[np.argsort(-mag)[: per_block // 2]]
        rest = rng.choice(idx, size=min(per_block - top.size, idx.size), replace=False)
        coords += sorted(set(top.tolist()) | set(rest.tolist()))
    coords = np.array(sorted(set(coords)))

    def loss_at(p: torch.Tensor) -> float:
        parts_p, _ = compute_loss(field.with_params(p), batch, cfg)
        return float(parts_p.total.detach())

    base = params.detach()
    numeric = np.zeros(coords.size)
    for k, i in enumerate(coords):
        vals = []
        for step in (-2 * h, -h, h, 2 * h):
            p = base.clone()
            p[i] += step
            vals.append(loss_at(p))
        numeric[k] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    analytic = grad[coords].numpy()
    scale = max(float(np.abs(grad.numpy()).max()), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()), coords, analytic, numeric, rel, float(parts.total.detach()), tuple(window))
