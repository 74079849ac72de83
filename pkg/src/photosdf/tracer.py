"""Sphere tracing against an SDF and per-pixel geometry buffers."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .camera import Camera
from .config import TraceConfig
from .field import DTYPE, Field, FieldError, eval_sdf


@dataclass
class SurfaceHit:
    x: torch.Tensor
    n: torch.Tensor
    t: float
    converged: bool


@dataclass
class RayHits:
    """Batched tracing result. Entries where ``hit`` is False are undefined."""

    x: torch.Tensor  # (N, 3)
    n: torch.Tensor  # (N, 3) unit, oriented toward the ray origin
    t: torch.Tensor  # (N,)
    hit: torch.Tensor  # (N,) bool
    converged: torch.Tensor  # (N,) bool
    residual: torch.Tensor  # (N,) |S| at the final point


def clip_to_sphere(origins, dirs, radius: float):
    """Entry/exit distances of rays against a centered sphere."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius**2
    disc = b * b - c
    valid = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - root, min=0.0)
    far = -b + root
    valid &= far > 0
    return near, far, valid


def trace_rays(field: Field, origins: torch.Tensor, dirs: torch.Tensor, cfg: TraceConfig) -> RayHits:
    """Plain sphere tracing (relaxation 1) clipped to the scene bound.

    Rays that hit |S| <= eps_hit converge. Rays that exhaust ``max_steps``
    inside the bound with |S| <= grazing_factor * eps_hit also count as hits.
    """
    n_rays = origins.shape[0]
    near, far, valid = clip_to_sphere(origins, dirs, cfg.scene_radius)
    t = near.clone()
    converged = torch.zeros(n_rays, dtype=torch.bool)
    residual = torch.full((n_rays,), float("inf"), dtype=DTYPE)
    active = valid.clone()
    with torch.no_grad():
        for _ in range(cfg.max_steps):
            idx = active.nonzero().squeeze(-1)
            if idx.numel() == 0:
                break
            x = origins[idx] + t[idx, None] * dirs[idx]
            S = field.sdf(x)[0]
            if not bool(torch.isfinite(S).all()):
                raise FieldError("non-finite SDF value during sphere tracing")
            residual[idx] = S.abs()
            done = S.abs() <= cfg.eps_hit
            converged[idx[done]] = True
            t_new = t[idx] + S
            t[idx] = torch.where(done, t[idx], t_new)
            escaped = t_new > far[idx]
            active[idx[done | escaped]] = False
        # rays still active ran out of steps; stopped rays beyond far are misses
        inside = valid & (t <= far)
        hit = converged | (inside & ~converged & (residual <= cfg.grazing_factor * cfg.eps_hit))
    x = origins + t[:, None] * dirs
    n = torch.zeros_like(x)
    hidx = hit.nonzero().squeeze(-1)
    if hidx.numel():
        _, _, g = eval_sdf(field, x[hidx])
        nn = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
        flip = (nn * dirs[hidx]).sum(-1) > 0
        nn = torch.where(flip[:, None], -nn, nn)
        n[hidx] = nn
    return RayHits(x=x, n=n, t=t, hit=hit, converged=converged, residual=residual)


def sphere_trace(field: Field, camera: Camera, pixel, cfg: TraceConfig | None = None) -> SurfaceHit | None:
    """Trace one ray through subpixel coordinates ``pixel``; None on a miss."""
    cfg = cfg or TraceConfig()
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel {pixel} outside the image")
    o, d = camera.rays(torch.tensor([[u, v]], dtype=DTYPE))
    hits = trace_rays(field, o, d, cfg)
    if not bool(hits.hit[0]):
        return None
    return SurfaceHit(hits.x[0], hits.n[0], float(hits.t[0]), bool(hits.converged[0]))


# --------------------------------------------------------------------------
# geometry buffers


SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=DTYPE) / 8.0


def miss_depth(camera: Camera, cfg: TraceConfig) -> float:
    """Depth sentinel for misses: beyond any point inside the scene bound."""
    return float(torch.linalg.norm(camera.origin)) + 2.0 * cfg.scene_radius


def sobel_magnitude(depth: torch.Tensor) -> torch.Tensor:
    """Normalized 3x3 Sobel gradient magnitude (depth units per pixel).

    Borders are edge-replicated so the image frame itself never reads as a
    depth jump; misses already carry the sentinel depth.
    """
    d = F.pad(depth[None, None], (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(d, SOBEL_X[None, None])
    gy = F.conv2d(d, SOBEL_X.T.contiguous()[None, None])
    return torch.sqrt(gx**2 + gy**2)[0, 0]


@dataclass
class GeomBuffers:
    depth: torch.Tensor  # (h, w) z-depth, sentinel for misses
    normal: torch.Tensor  # (h, w, 3)
    hit: torch.Tensor  # (h, w) bool
    discontinuity: torch.Tensor  # (h, w) bool
    points: torch.Tensor  # (h, w, 3) hit positions
    t: torch.Tensor  # (h, w) ray distance
    window: tuple[int, int, int, int]  # x0, y0, w, h in image pixels


def render_geom_buffers(
    field: Field, camera: Camera, cfg: TraceConfig | None = None, window: tuple[int, int, int, int] | None = None
) -> GeomBuffers:
    """Center-ray depth/normal/hit buffers plus the Sobel discontinuity mask.

    ``window`` = (x0, y0, w, h) restricts tracing to a sub-rectangle. The
    window may extend past the image; out-of-image pixels are treated as
    misses.
    """
    cfg = cfg or TraceConfig()
    x0, y0, w, h = window or (0, 0, camera.width, camera.height)
    uv = camera.pixel_centers(x0, y0, w, h).reshape(-1, 2)
    in_image = (uv[:, 0] > 0) & (uv[:, 0] < camera.width) & (uv[:, 1] > 0) & (uv[:, 1] < camera.height)
    o, d = camera.rays(uv)
    hits = trace_rays(field, o, d, cfg)
    hit = hits.hit & in_image
    sentinel = miss_depth(camera, cfg)
    zdepth = hits.t * (d @ camera.forward)
    depth = torch.where(hit, zdepth, torch.full_like(zdepth, sentinel)).reshape(h, w)
    normal = torch.where(hit[:, None], hits.n, torch.zeros_like(hits.n)).reshape(h, w, 3)
    mag = sobel_magnitude(depth)
    return GeomBuffers(
        depth=depth,
        normal=normal,
        hit=hit.reshape(h, w),
        discontinuity=mag > cfg.sobel_tau,
        points=hits.x.reshape(h, w, 3),
        t=hits.t.reshape(h, w),
        window=(x0, y0, w, h),
    )
