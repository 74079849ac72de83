"""Synthetic collocated-flash captures of analytic scenes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .camera import Camera
from .checkpoint import atomic_write_bytes
from .config import Config, desk_profile
from .export import marching_cubes, write_obj
from .field import AnalyticField, ConstantMaterial, Sphere, Torus, TwoToneMaterial, Union
from .io import Dataset, save_dataset
from .shade import render_image

CAMERA_DISTANCE = 3.0
FOV_DEG = 40.0
LIGHT_INTENSITY = 12.0


def scene_field(name: str) -> AnalyticField:
    """Ground-truth analytic field of a named scene (all fit in the unit sphere)."""
    if name == "sphere":
        return AnalyticField(Sphere(0.6), ConstantMaterial((0.6, 0.5, 0.4), (0.3, 0.3, 0.3), 0.3), LIGHT_INTENSITY)
    if name == "two_tone_sphere":
        mat = TwoToneMaterial((0.8, 0.3, 0.2), (0.2, 0.4, 0.8), (0.2, 0.2, 0.2), 0.3)
        return AnalyticField(Sphere(0.6), mat, LIGHT_INTENSITY)
    if name == "torus":
        return AnalyticField(Torus(0.6, 0.25), ConstantMaterial((0.5, 0.6, 0.4), (0.2, 0.2, 0.2), 0.35), LIGHT_INTENSITY)
    if name == "blobby_union":
        shape = Union([Sphere(0.4, (-0.25, 0.0, 0.0)), Sphere(0.35, (0.3, 0.1, 0.0)), Sphere(0.3, (0.0, -0.2, 0.25))], smooth=0.1)
        return AnalyticField(shape, ConstantMaterial((0.4, 0.5, 0.7), (0.3, 0.3, 0.3), 0.25), LIGHT_INTENSITY)
    raise ValueError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}")


SCENES = ("sphere", "two_tone_sphere", "torus", "blobby_union")


def sample_cameras(num_views: int, resolution: int, seed: int) -> list[Camera]:
    """Cameras on a radius-3 sphere looking at the origin, uniform directions."""
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(num_views):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        cams.append(Camera.look_at(CAMERA_DISTANCE * d, width=resolution, height=resolution, fov_deg=FOV_DEG))
    return cams


def render_views(field, cameras: list[Camera], cfg: Config) -> list[np.ndarray]:
    out = []
    for cam in cameras:
        img, _, _ = render_image(field, cam, cfg.shade, cfg.trace, cfg.edges)
        out.append(img.detach().numpy())
    return out


def make_synthetic(
    out_dir: str | Path, scene_name: str, num_views: int, resolution: int, seed: int = 0, cfg: Config | None = None
) -> Dataset:
    """Render a dataset plus ground-truth ``scene.json`` and ``gt_mesh.obj``."""
    if scene_name not in SCENES:
        raise ValueError(f"unknown scene {scene_name!r}; choose from {', '.join(SCENES)}")
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    cfg = cfg or desk_profile()
    field = scene_field(scene_name)
    cams = sample_cameras(num_views, resolution, seed)
    dataset = save_dataset(out_dir, cams, render_views(field, cams, cfg))
    root = Path(out_dir)
    meta = {
        "scene": scene_name,
        "num_views": num_views,
        "resolution": resolution,
        "seed": seed,
        "light_intensity": LIGHT_INTENSITY,
        "brdf": cfg.shade.brdf,
    }
    atomic_write_bytes(root / "scene.json", json.dumps(meta, indent=1).encode())
    write_obj(root / "gt_mesh.obj", marching_cubes(field, 128, 1.0))
    return dataset
