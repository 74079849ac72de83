"""Silhouette edge points on an SDF zero level set.

Edge points are located by walking on the surface from center-ray hits
toward the silhouette, then projected to subpixel image coordinates. The
reparametrizations make hit points differentiable w.r.t. field parameters:
interior points move along the view ray, edge points along the normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera
from .config import EdgeWalkConfig, TraceConfig
from .field import DTYPE, Field, eval_sdf
from .tracer import GeomBuffers

SINGULAR_GRAD = 1e-6


@dataclass
class EdgePoints:
    """A batch of edge points (all tensors detached)."""

    x: torch.Tensor  # (M, 3) on the zero level set
    n: torch.Tensor  # (M, 3) unit outward normal
    uv: torch.Tensor  # (M, 2) subpixel location
    uv_normal: torch.Tensor  # (M, 2) unit projected normal
    owner: torch.Tensor  # (M, 2) int64 pixel (i, j) = floor(uv)

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def empty(cls) -> "EdgePoints":
        z = torch.zeros
        return cls(z(0, 3, dtype=DTYPE), z(0, 3, dtype=DTYPE), z(0, 2, dtype=DTYPE), z(0, 2, dtype=DTYPE), z(0, 2, dtype=torch.int64))

    def select(self, idx) -> "EdgePoints":
        return EdgePoints(self.x[idx], self.n[idx], self.uv[idx], self.uv_normal[idx], self.owner[idx])


def _surface_state(field: Field, x: torch.Tensor):
    S, _, g = eval_sdf(field, x)
    return S, g


def _reproject(field, x, S, g, cfg: EdgeWalkConfig, eps_hit: float):
    """Up to ``newton_steps`` iterations of x <- x - S grad / |grad|^2."""
    for _ in range(cfg.newton_steps):
        off = S.abs() > eps_hit
        if not bool(off.any()):
            break
        g2 = (g[off] ** 2).sum(-1).clamp_min(1e-24)
        x = x.clone()
        x[off] = x[off] - (S[off] / g2)[:, None] * g[off]
        S2, g2_ = _surface_state(field, x[off])
        S, g = S.clone(), g.clone()
        S[off], g[off] = S2, g2_
    return x, S, g


def walk_to_edges(
    field: Field, origin: torch.Tensor, starts: torch.Tensor, cfg: EdgeWalkConfig, eps_hit: float = 5e-5
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched surface walk toward the silhouette.

    Returns (x, n, found). A walk stops as soon as |view . n| < delta; otherwise
    it steps x <- x + eps (n - (o - x) / ((o - x) . n)), reprojects onto the
    level set, and gives up after K tests. Walks that cannot be kept within
    eps_hit of the surface are aborted.
    """
    x = starts.detach().clone()
    m = x.shape[0]
    found = torch.zeros(m, dtype=torch.bool)
    active = torch.ones(m, dtype=torch.bool)
    n_out = torch.zeros_like(x)
    if m == 0:
        return x, n_out, found
    S, g = _surface_state(field, x)
    for _ in range(cfg.K):
        idx = active.nonzero().squeeze(-1)
        if idx.numel() == 0:
            break
        xa, Sa, ga = _reproject(field, x[idx], S[idx], g[idx], cfg, eps_hit)
        gnorm = torch.linalg.norm(ga, dim=-1)
        ok = (Sa.abs() <= eps_hit) & (gnorm > SINGULAR_GRAD)
        na = ga / gnorm.clamp_min(1e-12)[:, None]
        to_cam = origin - xa
        dist = torch.linalg.norm(to_cam, dim=-1)
        cos = -(to_cam * na).sum(-1) / dist
        at_edge = ok & (cos.abs() < cfg.delta)
        denom = (to_cam * na).sum(-1)
        degenerate = denom.abs() < 1e-12
        step = na - to_cam / torch.where(degenerate, torch.ones_like(denom), denom)[:, None]
        x_next = xa + cfg.eps * step
        x[idx], n_out[idx] = xa, na
        found[idx[at_edge]] = True
        stop = at_edge | ~ok | degenerate
        active[idx[stop]] = False
        move = ~stop
        x[idx[move]] = x_next[move]
        S_new, g_new = _surface_state(field, x_next[move])
        S[idx[move]], g[idx[move]] = S_new, g_new
    return x, n_out, found


def project_edge_points(camera: Camera, x: torch.Tensor, n: torch.Tensor, min_normal: float = 1e-4):
    """Project 3D edge points; returns (uv, uv_normal, owner, valid)."""
    uv, z = camera.project(x)
    d = camera.project_direction(x, n)
    dn = torch.linalg.norm(d, dim=-1)
    valid = (z > 0) & (dn >= min_normal)
    uv_normal = d / dn.clamp_min(1e-12)[:, None]
    owner = torch.floor(uv).to(torch.int64)
    return uv, uv_normal, owner, valid


def project_edge_point(camera: Camera, x, n):
    """Single-point projection: (uv, uv_normal, owner_pixel).

    Raises ValueError when the point is behind the camera.
    """
    x = torch.as_tensor(x, dtype=DTYPE)[None]
    n = torch.as_tensor(n, dtype=DTYPE)[None]
    uv, un, owner, _ = project_edge_points(camera, x, n, min_normal=0.0)
    if float(camera.project(x)[1][0]) <= 0:
        raise ValueError("point is behind the camera")
    return uv[0], un[0], (int(owner[0, 0]), int(owner[0, 1]))


def dedup_by_owner(points: EdgePoints) -> EdgePoints:
    """Keep one point per owner pixel: the one nearest the pixel center."""
    if len(points) == 0:
        return points
    center = points.owner.to(DTYPE) + 0.5
    dist = torch.linalg.norm(points.uv - center, dim=-1).numpy()
    key = points.owner[:, 1].numpy() * 1_000_003 + points.owner[:, 0].numpy()
    order = np.lexsort((dist, key))
    _, first = np.unique(key[order], return_index=True)
    keep = np.sort(order[first])
    return points.select(torch.from_numpy(keep))


def find_edge_points(
    field: Field,
    camera: Camera,
    buffers: GeomBuffers,
    walk: EdgeWalkConfig,
    trace: TraceConfig,
    owner_window: tuple[int, int, int, int] | None = None,
) -> EdgePoints:
    """One walk per discontinuity pixel that has a hit; dedup by owner pixel.

    Edge points whose owner pixel falls outside ``owner_window`` (default:
    the image) are dropped, which also discards walks that left the frustum.
    """
    launch = buffers.discontinuity & buffers.hit
    starts = buffers.points[launch]
    if starts.shape[0] == 0:
        return EdgePoints.empty()
    x, n, found = walk_to_edges(field, camera.origin, starts, walk, trace.eps_hit)
    x, n = x[found], n[found]
    if x.shape[0] == 0:
        return EdgePoints.empty()
    uv, uv_normal, owner, valid = project_edge_points(camera, x, n)
    x0, y0, w, h = owner_window or (0, 0, camera.width, camera.height)
    valid &= (owner[:, 0] >= max(x0, 0)) & (owner[:, 0] < min(x0 + w, camera.width))
    valid &= (owner[:, 1] >= max(y0, 0)) & (owner[:, 1] < min(y0 + h, camera.height))
    pts = EdgePoints(x[valid], n[valid], uv[valid], uv_normal[valid], owner[valid])
    return dedup_by_owner(pts)


# --------------------------------------------------------------------------
# differentiable reparametrizations


def reparam_edge(field: Field, x: torch.Tensor, n: torch.Tensor):
    """x_theta = x - n S_theta(x), with n held constant.

    Returns (x_theta, valid); points with a vanishing spatial gradient are
    flagged invalid and should be skipped.
    """
    x = x.detach()
    n = n.detach()
    S, _, g = eval_sdf(field, x)
    valid = torch.linalg.norm(g, dim=-1) >= SINGULAR_GRAD
    S_theta = field.sdf(x)[0]
    return x - n * S_theta[..., None], valid


def reparam_interior(field: Field, origin: torch.Tensor, x: torch.Tensor, n: torch.Tensor, min_cos: float = 1e-6):
    """x_theta = x - (o - x) / (n . (o - x)) S_theta(x): motion along the ray.

    Grazing points (|n . (o - x)| -> 0) are flagged invalid.
    """
    x = x.detach()
    n = n.detach()
    w = origin - x
    denom = (n * w).sum(-1)
    valid = denom.abs() > min_cos * torch.linalg.norm(w, dim=-1)
    safe = torch.where(valid, denom, torch.ones_like(denom))
    S_theta = field.sdf(x)[0]
    return x - (w / safe[..., None]) * S_theta[..., None], valid
