"""Mesh extraction, UV charting, texture baking and asset writers."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes as _skimage_mc

from .brdf import BrdfParams, eval_brdf
from .camera import Camera
from .checkpoint import atomic_write_bytes
from .config import ShadeConfig
from .field import DTYPE, Field, eval_sdf
from .io import write_pfm, write_png16

CHUNK = 65536


@dataclass
class MeshAsset:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    uv: np.ndarray | None = None  # (V, 2) in [0, 1]
    textures: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)


def evaluate_sdf_grid(field: Field, grid_res: int, bounds: float) -> np.ndarray:
    axis = torch.linspace(-bounds, bounds, grid_res, dtype=DTYPE)
    pts = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1).reshape(-1, 3)
    out = []
    with torch.no_grad():
        for chunk in torch.split(pts, CHUNK):
            out.append(field.sdf(chunk)[0])
    return torch.cat(out).reshape(grid_res, grid_res, grid_res).numpy()


def clean_mesh(vertices: np.ndarray, faces: np.ndarray, area_tol: float = 1e-12) -> MeshAsset:
    """Weld coincident vertices and drop degenerate and unused elements."""
    if len(faces) == 0:
        return MeshAsset(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    key = np.round(vertices / 1e-9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    vertices = vertices[first]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    mesh = MeshAsset(vertices, faces)
    mesh.faces = faces[mesh.face_areas() > area_tol]
    used = np.unique(mesh.faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return MeshAsset(vertices[used], remap[mesh.faces].astype(np.int64))


def marching_cubes(field: Field, grid_res: int = 64, bounds: float = 1.2) -> MeshAsset:
    """Zero level set of the SDF sampled on a grid_res^3 lattice over [-bounds, bounds]^3.

    Uses the classic 256-case table with linear edge interpolation. The
    grid is padded with one layer of positive values, so surfaces crossing
    the bounds are capped and the mesh stays closed. Faces are wound with
    normals pointing toward increasing S (outward).
    """
    if grid_res < 8:
        raise ValueError("grid_res must be >= 8")
    vol = evaluate_sdf_grid(field, grid_res, bounds)
    if not (vol.min() < 0 < vol.max()):
        warnings.warn("SDF has no zero crossing in the grid; returning an empty mesh")
        return MeshAsset(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    step = 2 * bounds / (grid_res - 1)
    vol = np.pad(vol, 1, constant_values=max(float(vol.max()), step))
    verts, faces, _, _ = _skimage_mc(vol, level=0.0, spacing=(step,) * 3, method="lorensen")
    return clean_mesh(verts.astype(np.float64) - bounds - step, faces.astype(np.int64))


# --------------------------------------------------------------------------
# UV atlas


def make_uv_atlas(mesh: MeshAsset, margin: float = 0.02) -> MeshAsset:
    """Box-projection charts, shelf-packed into the unit square.

    ``margin`` is the gutter between islands as a fraction of the atlas
    (0.02 is about 5 texels at 256).

    Each face goes to the chart of its dominant normal axis and sign; each
    chart is split into connected components so that overlapping layers
    (e.g. both sides of a hole) get their own islands. Vertices on chart
    seams are duplicated. One uniform scale is used for all islands.
    """
    if mesh.empty:
        return MeshAsset(mesh.vertices, mesh.faces, np.zeros((0, 2)), {})
    n = mesh.face_normals()
    axis = np.abs(n).argmax(axis=1)
    chart = axis * 2 + (n[np.arange(len(n)), axis] < 0)
    # split vertices per chart: new vertex id for each (vertex, chart) pair
    pair = mesh.faces * 6 + chart[:, None]
    uniq, inverse = np.unique(pair.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)
    src = uniq // 6
    vchart = uniq % 6
    vertices = mesh.vertices[src]
    # islands: connected components over shared (split) vertices
    nv = len(vertices)
    rows = np.concatenate([faces[:, 0], faces[:, 1]])
    cols = np.concatenate([faces[:, 1], faces[:, 2]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    n_islands, label = connected_components(graph, directed=False)
    drop = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
    flat = np.zeros((nv, 2))
    for c in range(6):
        sel = vchart == c
        a, b = drop[c // 2]
        flat[sel] = vertices[sel][:, [a, b]]
        if c % 2:
            flat[sel, 0] *= -1  # mirror the negative-facing chart so islands keep orientation
    lo = np.full((n_islands, 2), np.inf)
    hi = np.full((n_islands, 2), -np.inf)
    np.minimum.at(lo, label, flat)
    np.maximum.at(hi, label, flat)
    size = hi - lo
    # shelf packing in island units; the gutter is a fixed fraction of the final atlas
    order = np.argsort(-size[:, 1], kind="stable")
    pad = 0.0
    for _ in range(4):
        width = max(np.sqrt(((size[:, 0] + pad) * (size[:, 1] + pad)).sum()) * 1.25, (size[:, 0] + pad).max())
        offset = np.zeros((n_islands, 2))
        x = y = shelf = pad
        for i in order:
            if x + size[i, 0] + pad > width + pad and x > pad:
                x, y, shelf = pad, y + shelf + pad, 0.0
            offset[i] = (x, y)
            x += size[i, 0] + pad
            shelf = max(shelf, size[i, 1])
        extent = max(width + pad, y + shelf + pad)
        pad = max(margin * extent, 1e-9)
    uv = (flat - lo[label] + offset[label]) / extent
    return MeshAsset(vertices, faces.astype(np.int64), np.clip(uv, 0.0, 1.0), {})


def _rasterize_triangles_2d(tri: np.ndarray, width: int, height: int, sub: int = 1):
    """Sample points (in pixel units) inside 2D triangles on a sub x sub grid per pixel.

    Returns (face_index, barycentrics (N, 3), sample_xy (N, 2)).
    """
    lo = np.floor(tri.min(axis=1) * sub - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) * sub - 0.5).astype(np.int64)
    lo = np.clip(lo, 0, [width * sub - 1, height * sub - 1])
    hi = np.clip(hi, 0, [width * sub - 1, height * sub - 1])
    nx = hi[:, 0] - lo[:, 0] + 1
    ny = hi[:, 1] - lo[:, 1] + 1
    count = nx * ny
    face = np.repeat(np.arange(len(tri)), count)
    if len(face) == 0:
        return face, np.zeros((0, 3)), np.zeros((0, 2))
    start = np.repeat(np.cumsum(count) - count, count)
    local = np.arange(len(face)) - start
    ix = lo[face, 0] + local % nx[face]
    iy = lo[face, 1] + local // nx[face]
    p = (np.stack([ix, iy], axis=1) + 0.5) / sub
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    ok = np.abs(den) > 1e-18
    den = np.where(ok, den, 1.0)
    l1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    l0 = 1.0 - l1 - l2
    tol = -1e-9
    inside = ok & (l0 >= tol) & (l1 >= tol) & (l2 >= tol)
    bary = np.stack([l0, l1, l2], axis=1)[inside]
    return face[inside], bary, p[inside]


def _face_islands(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """Connected-component label per face (faces sharing a vertex are connected)."""
    rows = np.concatenate([faces[:, 0], faces[:, 1]])
    cols = np.concatenate([faces[:, 1], faces[:, 2]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    _, label = connected_components(graph, directed=False)
    return label[faces[:, 0]]


def _query_materials(field: Field, pts: np.ndarray, project: bool = True):
    out_b, out_k, out_r = [], [], []
    for chunk in np.array_split(pts, max(1, int(np.ceil(len(pts) / CHUNK)))):
        x = torch.tensor(chunk, dtype=DTYPE)
        S, f, g = eval_sdf(field, x)
        if project:
            x = x - (S / (g * g).sum(-1).clamp_min(1e-12))[:, None] * g
            S, f, g = eval_sdf(field, x)
        n = g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)
        with torch.no_grad():
            b, k, r = field.materials(x, n, f)
        out_b.append(b.numpy())
        out_k.append(k.numpy())
        out_r.append(r.numpy())
    return np.concatenate(out_b), np.concatenate(out_k), np.concatenate(out_r)


def bake_textures(field: Field, mesh: MeshAsset, resolution: int = 256, samples_per_texel: int = 4) -> MeshAsset:
    """Sample materials at surface points and splat them into UV textures.

    Samples sit on a sqrt(samples_per_texel)^2 grid per texel plus one per
    face centroid; each is splatted bilinearly. Texels no sample reached
    copy their nearest covered texel.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no UV atlas; call make_uv_atlas first")
    res = int(resolution)
    if mesh.empty:
        return MeshAsset(mesh.vertices, mesh.faces, mesh.uv, {
            "diffuse": np.zeros((res, res, 3)), "specular": np.zeros((res, res, 3)), "roughness": np.zeros((res, res))})
    sub = max(1, int(round(np.sqrt(samples_per_texel))))
    # texture space: x = u * res, y = (1 - v) * res (row 0 at the top)
    tuv = np.stack([mesh.uv[:, 0] * res, (1.0 - mesh.uv[:, 1]) * res], axis=1)
    face, bary, xy = _rasterize_triangles_2d(tuv[mesh.faces], res, res, sub)
    nf = len(mesh.faces)
    face = np.concatenate([face, np.arange(nf)])
    bary = np.concatenate([bary, np.full((nf, 3), 1.0 / 3.0)])
    xy = np.concatenate([xy, tuv[mesh.faces].mean(axis=1)])
    pts = (mesh.vertices[mesh.faces[face]] * bary[:, :, None]).sum(axis=1)
    beta, kappa, rough = _query_materials(field, pts)
    values = np.concatenate([beta, kappa, rough[:, None]], axis=1)
    acc = np.zeros((res * res, values.shape[1]))
    wsum = np.zeros(res * res)
    # texels inside an island only take samples from that island
    island = _face_islands(mesh.faces, len(mesh.vertices))
    owner = np.full(res * res, -1, dtype=np.int64)
    of, _, oxy = _rasterize_triangles_2d(tuv[mesh.faces], res, res, 1)
    owner[np.floor(oxy[:, 1]).astype(np.int64) * res + np.floor(oxy[:, 0]).astype(np.int64)] = island[of]
    sample_island = island[face]
    # bilinear splat onto texel centers
    fx, fy = xy[:, 0] - 0.5, xy[:, 1] - 0.5
    x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
    tx, ty = fx - x0, fy - y0
    for dx, dy, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)), (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        cx = np.clip(x0 + dx, 0, res - 1)
        cy = np.clip(y0 + dy, 0, res - 1)
        idx = cy * res + cx
        w = np.where((owner[idx] < 0) | (owner[idx] == sample_island), w, 0.0)
        np.add.at(acc, idx, w[:, None] * values)
        np.add.at(wsum, idx, w)
    covered = wsum > 1e-8
    tex = np.zeros_like(acc)
    tex[covered] = acc[covered] / wsum[covered, None]
    tex = tex.reshape(res, res, -1)
    cov = covered.reshape(res, res)
    if not cov.all():
        _, (iy, ix) = distance_transform_edt(~cov, return_indices=True)
        tex = tex[iy, ix]
    textures = {"diffuse": tex[..., 0:3], "specular": tex[..., 3:6], "roughness": tex[..., 6], "coverage": cov}
    return MeshAsset(mesh.vertices, mesh.faces, mesh.uv, textures)


def sample_texture(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup with clamped borders; uv (N, 2) in [0, 1]."""
    res_y, res_x = tex.shape[:2]
    fx = uv[:, 0] * res_x - 0.5
    fy = (1.0 - uv[:, 1]) * res_y - 0.5
    x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
    tx, ty = fx - x0, fy - y0
    if tex.ndim == 2:
        tex = tex[..., None]
    out = 0.0
    for dx, dy, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)), (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        out = out + w[:, None] * tex[np.clip(y0 + dy, 0, res_y - 1), np.clip(x0 + dx, 0, res_x - 1)]
    return out


# --------------------------------------------------------------------------
# writers


def write_obj(path: str | Path, mesh: MeshAsset, mtl_name: str | None = None) -> None:
    lines = []
    if mtl_name:
        lines += [f"mtllib {mtl_name}", "usemtl material0"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uv is not None:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uv]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_obj(path: str | Path) -> MeshAsset:
    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(t) for t in parts[1:3]])
        elif parts[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
    uv = np.asarray(uvs, dtype=np.float64) if len(uvs) == len(verts) and uvs else None
    return MeshAsset(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), uv)


def write_asset(out_dir: str | Path, mesh: MeshAsset, name: str = "mesh") -> Path:
    """OBJ + MTL, 16-bit PNG albedos and a PFM roughness map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mtl = f"{name}.mtl"
    write_obj(out / f"{name}.obj", mesh, mtl if mesh.textures else None)
    if mesh.textures:
        write_png16(out / "diffuse.png", mesh.textures["diffuse"])
        write_png16(out / "specular.png", mesh.textures["specular"])
        write_pfm(out / "roughness.pfm", mesh.textures["roughness"])
        text = "newmtl material0\nKd 1 1 1\nKs 1 1 1\nmap_Kd diffuse.png\nmap_Ks specular.png\nmap_Pr roughness.pfm\n"
        atomic_write_bytes(out / mtl, text.encode())
    return out / f"{name}.obj"


# --------------------------------------------------------------------------
# reference rasterizer for round-trip checks


def rasterize_mesh(mesh: MeshAsset, camera: Camera, supersample: int = 1):
    """Z-buffered point sampling of a mesh at (supersampled) pixel centers.

    Returns (face_id (H, W) with -1 for empty, perspective-correct
    barycentrics (H, W, 3)) at the supersampled resolution.
    """
    s = supersample
    W, H = camera.width * s, camera.height * s
    uv, z = camera.project(torch.tensor(mesh.vertices, dtype=DTYPE))
    uv, z = uv.numpy() * s, z.numpy()
    front = (z[mesh.faces] > 1e-6).all(axis=1)
    fidx = np.nonzero(front)[0]
    face, bary2d, p = _rasterize_triangles_2d(uv[mesh.faces[fidx]], W, H, 1)
    face = fidx[face]
    # perspective-correct weights: screen barycentrics divided by vertex depth
    inv_z = 1.0 / z[mesh.faces[face]]
    w = bary2d * inv_z
    depth = 1.0 / w.sum(axis=1)
    bary = w * depth[:, None]
    ix = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, W - 1)
    iy = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, H - 1)
    pix = iy * W + ix
    order = np.lexsort((depth, pix))
    pix, face, bary = pix[order], face[order], bary[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    face_id = np.full(H * W, -1, dtype=np.int64)
    bary_img = np.zeros((H * W, 3))
    face_id[pix[first]] = face[first]
    bary_img[pix[first]] = bary[first]
    return face_id.reshape(H, W), bary_img.reshape(H, W, 3)


def vertex_normals(mesh: MeshAsset) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # area weighted
    n = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(n, mesh.faces[:, k], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)


def render_mesh(mesh: MeshAsset, camera: Camera, light_intensity: float, cfg: ShadeConfig, supersample: int = 3) -> np.ndarray:
    """Shade a textured mesh under the collocated light (box-filtered supersampling)."""
    face_id, bary = rasterize_mesh(mesh, camera, supersample)
    H, W = face_id.shape
    out = np.full((H, W, 3), cfg.background, dtype=np.float64)
    hit = face_id >= 0
    if hit.any():
        f = mesh.faces[face_id[hit]]
        b = bary[hit]
        x = (mesh.vertices[f] * b[:, :, None]).sum(axis=1)
        vn = vertex_normals(mesh)
        n = (vn[f] * b[:, :, None]).sum(axis=1)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
        uv = (mesh.uv[f] * b[:, :, None]).sum(axis=1)
        o = camera.cam_to_world[:, 3]
        to_l = o - x
        d2 = (to_l**2).sum(axis=1)
        wo = to_l / np.sqrt(d2)[:, None]
        cos = (n * wo).sum(axis=1)
        n = np.where(cos[:, None] < 0, -n, n)
        cos = np.abs(cos)
        t = lambda a: torch.tensor(a, dtype=DTYPE)  # noqa: E731
        if cfg.shading == "constant":
            col = np.broadcast_to(np.asarray(cfg.constant_color, dtype=np.float64) * light_intensity, x.shape)
        else:
            p = BrdfParams(
                t(sample_texture(mesh.textures["diffuse"], uv)),
                t(sample_texture(mesh.textures["specular"], uv)),
                t(sample_texture(mesh.textures["roughness"], uv)[:, 0]),
                cfg.int_ior,
                cfg.ext_ior,
            )
            fr = eval_brdf(p, t(wo), t(wo), t(n), cfg.brdf).numpy()
            col = (light_intensity / d2 * cos)[:, None] * fr
        out[hit] = col
    s = supersample
    return out.reshape(H // s, s, W // s, s, 3).mean(axis=(1, 3))
