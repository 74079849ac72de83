"""Collocated point-light shading and edge-aware image rendering.

Rendering is split in two phases. :func:`plan_render` runs everything that
is not differentiated (sphere tracing, discontinuity detection, edge walks,
tracing of the two side rays of every edge pixel). :func:`evaluate_plan`
then shades the planned points through the reparametrizations, so its output
is differentiable w.r.t. all field parameters and the light intensity.
Freezing the plan also makes finite-difference checks well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .brdf import BrdfParams, eval_brdf
from .camera import Camera
from .config import EdgeWalkConfig, ShadeConfig, TraceConfig
from .edges import EdgePoints, find_edge_points, reparam_edge, reparam_interior
from .field import DTYPE, Field, eval_sdf
from .tracer import render_geom_buffers, trace_rays

MISS, INTERIOR, EDGE = 0, 1, 2
FOOTPRINT_RADIUS = math.sqrt(2.0) / 2.0
ARCCOS_LIMIT = 1.0 - 1e-12


def edge_weight(uv: torch.Tensor, uv_normal: torch.Tensor) -> torch.Tensor:
    """Area fraction of the pixel footprint disk on the -uv_normal side.

    The footprint is the radius sqrt(2)/2 disk around the owner pixel center;
    the edge line passes through ``uv`` with unit normal ``uv_normal``.
    """
    center = torch.floor(uv.detach()) + 0.5
    t = math.sqrt(2.0) * (uv_normal * (uv - center)).sum(-1)
    alpha = 2.0 * torch.arccos(torch.clamp(t, -ARCCOS_LIMIT, ARCCOS_LIMIT))
    return 1.0 - (alpha - torch.sin(alpha)) / (2.0 * math.pi)


def side_points(uv: torch.Tensor, uv_normal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample locations A (weight w_A side) and B on the footprint circle."""
    center = torch.floor(uv) + 0.5
    offset = FOOTPRINT_RADIUS * uv_normal
    return center - offset, center + offset


def shade_points(field: Field, origin: torch.Tensor, x: torch.Tensor, cfg: ShadeConfig) -> torch.Tensor:
    """Radiance toward a collocated camera/light at ``origin``.

    ``x`` may carry a parameter graph (reparametrized points). Normals are
    recomputed at ``x`` by differentiating the SDF, flipped toward the
    camera; back-facing points are black.
    """
    if x.shape[0] == 0:
        return x.new_zeros(0, 3)
    if cfg.shading == "constant":
        return torch.tensor(cfg.constant_color, dtype=DTYPE).expand(x.shape[0], 3) * field.light_intensity
    _, f, g = eval_sdf(field, x, create_graph=True)
    n = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
    to_light = origin - x
    dist2 = (to_light * to_light).sum(-1)
    wo = to_light / torch.sqrt(dist2)[:, None]
    cos = (n * wo).sum(-1)
    n = torch.where(cos[:, None] < 0, -n, n)
    cos = cos.abs()
    beta, kappa, rough = field.materials(x, n, f)
    p = BrdfParams(beta, kappa, rough, cfg.int_ior, cfg.ext_ior)
    fr = eval_brdf(p, wo, wo, n, cfg.brdf)
    return (field.light_intensity / dist2 * cos)[:, None] * fr


def shade_point(field: Field, origin, x, cfg: ShadeConfig | None = None) -> torch.Tensor:
    """Single-point convenience wrapper around :func:`shade_points`."""
    x = torch.as_tensor(x, dtype=DTYPE)
    return shade_points(field, torch.as_tensor(origin, dtype=DTYPE), x.reshape(1, 3), cfg or ShadeConfig())[0]


@dataclass
class RenderPlan:
    """Frozen, non-differentiable part of a render of one window."""

    camera: Camera
    window: tuple[int, int, int, int]
    kind: torch.Tensor  # (h, w) MISS / INTERIOR / EDGE
    interior_index: torch.Tensor  # (P,) flat window index
    interior_x: torch.Tensor  # (P, 3)
    interior_n: torch.Tensor  # (P, 3)
    edges: EdgePoints
    edge_index: torch.Tensor  # (M,) flat window index of the owner pixel
    side_hit: torch.Tensor  # (2, M) bool, side A then B
    side_x: torch.Tensor  # (2, M, 3)
    side_n: torch.Tensor  # (2, M, 3)

    @property
    def num_edge_pixels(self) -> int:
        return len(self.edges)


def plan_render(
    field: Field,
    camera: Camera,
    trace: TraceConfig,
    walk: EdgeWalkConfig,
    edges: bool = True,
    window: tuple[int, int, int, int] | None = None,
    margin: int = 2,
) -> RenderPlan:
    """Trace a window, find edge pixels, and trace their side rays.

    Buffers are traced on the window grown by ``margin`` pixels so that the
    Sobel filter and edge walks see past the window border.
    """
    x0, y0, w, h = window or (0, 0, camera.width, camera.height)
    m = margin if edges else 0
    buf = render_geom_buffers(field, camera, trace, (x0 - m, y0 - m, w + 2 * m, h + 2 * m))
    hit = buf.hit[m : m + h, m : m + w]
    kind = torch.where(hit, INTERIOR, MISS)
    if edges:
        pts = find_edge_points(field, camera, buf, walk, trace, owner_window=(x0, y0, w, h))
    else:
        pts = EdgePoints.empty()
    edge_index = (pts.owner[:, 1] - y0) * w + (pts.owner[:, 0] - x0)
    kind.view(-1)[edge_index] = EDGE
    interior = (kind.view(-1) == INTERIOR).nonzero().squeeze(-1)
    pts_window = buf.points[m : m + h, m : m + w].reshape(-1, 3)
    n_window = buf.normal[m : m + h, m : m + w].reshape(-1, 3)
    n_edges = len(pts)
    side_hit = torch.zeros(2, n_edges, dtype=torch.bool)
    side_x = torch.zeros(2, n_edges, 3, dtype=DTYPE)
    side_n = torch.zeros(2, n_edges, 3, dtype=DTYPE)
    if n_edges:
        a, b = side_points(pts.uv, pts.uv_normal)
        o, d = camera.rays(torch.cat([a, b]))
        hits = trace_rays(field, o, d, trace)
        side_hit = hits.hit.reshape(2, n_edges)
        side_x = hits.x.reshape(2, n_edges, 3)
        side_n = hits.n.reshape(2, n_edges, 3)
    return RenderPlan(
        camera=camera,
        window=(x0, y0, w, h),
        kind=kind,
        interior_index=interior,
        interior_x=pts_window[interior],
        interior_n=n_window[interior],
        edges=pts,
        edge_index=edge_index,
        side_hit=side_hit,
        side_x=side_x,
        side_n=side_n,
    )


def evaluate_plan(field: Field, plan: RenderPlan, cfg: ShadeConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (h, w, 3) image for a frozen plan, plus the w_A map.

    Interior pixels are shaded at interior-reparametrized center hits. Edge
    pixels blend the two side colors with w_A, which depends on the field
    through the edge-reparametrized edge point.
    """
    cam = plan.camera
    o = cam.origin
    _, _, w, h = plan.window
    # all shading points in one batch: interior, then side A, then side B
    side_sel = plan.side_hit.reshape(-1).nonzero().squeeze(-1)
    xs = torch.cat([plan.interior_x, plan.side_x.reshape(-1, 3)[side_sel]])
    ns = torch.cat([plan.interior_n, plan.side_n.reshape(-1, 3)[side_sel]])
    x_theta, ok = reparam_interior(field, o, xs, ns)
    x_theta = torch.where(ok[:, None], x_theta, xs)  # grazing: shade, but no geometry gradient
    colors = shade_points(field, o, x_theta, cfg)
    p = plan.interior_x.shape[0]
    pixels = torch.full((h * w, 3), cfg.background, dtype=DTYPE)
    pixels = pixels + 0.0 * field.params[-1]  # keep the output on the tape
    pixels = pixels.index_put((plan.interior_index,), colors[:p])
    weights = torch.full((h * w,), float("nan"), dtype=DTYPE)
    m = len(plan.edges)
    if m:
        side = torch.full((2 * m, 3), cfg.background, dtype=DTYPE).index_put((side_sel,), colors[p:])
        c_a, c_b = side[:m], side[m:]
        xe, valid = reparam_edge(field, plan.edges.x, plan.edges.n)
        uv, _ = cam.project(xe)
        wa = edge_weight(uv, plan.edges.uv_normal)
        wa = torch.where(valid, wa, wa.detach())
        pixels = pixels.index_put((plan.edge_index,), wa[:, None] * c_a + (1.0 - wa[:, None]) * c_b)
        weights = weights.index_put((plan.edge_index,), wa.detach())
    return pixels.reshape(h, w, 3), weights.reshape(h, w)


def render_image(
    field: Field,
    camera: Camera,
    shade: ShadeConfig,
    trace: TraceConfig,
    walk: EdgeWalkConfig,
    window: tuple[int, int, int, int] | None = None,
) -> tuple[torch.Tensor, RenderPlan, torch.Tensor]:
    """Plan + evaluate; returns (image, plan, w_A map)."""
    plan = plan_render(field, camera, trace, walk, edges=shade.edges, window=window)
    image, weights = evaluate_plan(field, plan, shade)
    return image, plan, weights
