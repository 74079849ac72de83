"""Image and geometry metrics: PSNR, SSIM, Chamfer-L1."""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial import cKDTree

from .export import MeshAsset
from .losses import ssim


def display(img: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Linear radiance to [0, 1] display values (clamp, then gamma)."""
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak**2 / mse)


def image_psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """PSNR of display-mapped images."""
    return psnr(display(pred), display(target))


def image_ssim(pred: np.ndarray, target: np.ndarray) -> float:
    a = torch.as_tensor(display(pred))
    b = torch.as_tensor(display(target))
    return float(ssim(a, b, 1.0))


def sample_surface(mesh: MeshAsset, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.empty:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    face = rng.choice(len(area), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return (mesh.vertices[mesh.faces[face]] * bary[:, :, None]).sum(axis=1)


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points to triangles (row-wise)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
    v = vb / safe
    w = vc / safe
    q = a + ab * v[:, None] + ac * w[:, None]  # interior projection
    bc = (d4 - d3) + (d5 - d6)
    # Voronoi regions, lowest precedence first (later entries overwrite)
    cases = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * ((d4 - d3) / np.where(bc != 0, bc, 1.0))[:, None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * (d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0))[:, None]),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * (d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0))[:, None]),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d1 <= 0) & (d2 <= 0), a),
    ]
    for mask, point in cases:
        q = np.where(mask[:, None], point, q)
    return np.linalg.norm(p - q, axis=-1)


def point_mesh_distance(points: np.ndarray, mesh: MeshAsset, k: int = 8) -> np.ndarray:
    """Exact distance from points to a triangle mesh.

    A first pass over the k triangles with the closest centroids gives an
    upper bound d; any closer triangle has its centroid within d + R of the
    point (R: largest centroid-to-vertex radius), so a ball query finishes it.
    """
    tri = mesh.vertices[mesh.faces]
    cen = tri.mean(axis=1)
    radius = float(np.linalg.norm(tri - cen[:, None], axis=-1).max())
    tree = cKDTree(cen)
    k = min(k, len(tri))
    _, idx = tree.query(points, k=k)
    idx = idx.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        t = tri[idx[:, j]]
        best = np.minimum(best, point_triangle_distance(points, t[:, 0], t[:, 1], t[:, 2]))
    cand = tree.query_ball_point(points, best + radius + 1e-12)
    counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(points))
    pid = np.repeat(np.arange(len(points)), counts)
    fid = np.fromiter((f for c in cand for f in c), dtype=np.int64, count=int(counts.sum()))
    for chunk in np.array_split(np.arange(len(pid)), max(1, len(pid) // 200_000)):
        t = tri[fid[chunk]]
        d = point_triangle_distance(points[pid[chunk]], t[:, 0], t[:, 1], t[:, 2])
        np.minimum.at(best, pid[chunk], d)
    return best


def chamfer_l1(a: MeshAsset, b: MeshAsset, n_samples: int = 50_000, seed: int = 0) -> float:
    """Symmetric mean surface-sample-to-surface distance, averaged over both directions."""
    if a.empty or b.empty:
        return float("inf")
    pa = sample_surface(a, n_samples, seed)
    pb = sample_surface(b, n_samples, seed + 1)
    return 0.5 * (float(point_mesh_distance(pa, b).mean()) + float(point_mesh_distance(pb, a).mean()))
