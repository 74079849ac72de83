"""Configuration dataclasses and the two size profiles.

``desk`` is sized for a single CPU core and small images (64-96 px); ``paper``
mirrors full-scale settings (256-wide nets, 128 px patches, 100k/50k iters).
Geometry-scale constants of the edge walk and the Sobel threshold depend on
the pixel footprint, so they differ between the profiles.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from dataclasses import field as _field
from pathlib import Path
from typing import Any


@dataclass
class NetConfig:
    num_layers: int = 8
    width: int = 256
    skips: tuple[int, ...] = (4,)


@dataclass
class FieldConfig:
    sdf: NetConfig = _field(default_factory=lambda: NetConfig(8, 256, (4,)))
    diffuse: NetConfig = _field(default_factory=lambda: NetConfig(8, 256, (4,)))
    specular: NetConfig = _field(default_factory=lambda: NetConfig(4, 256, ()))
    roughness: NetConfig = _field(default_factory=lambda: NetConfig(4, 256, ()))
    feature_dim: int = 256
    sdf_frequencies: int = 6
    diffuse_frequencies: int = 10
    direction_frequencies: int = 4
    material_frequencies: int = 6
    init_radius: float = 0.5
    use_feature: bool = True
    light_intensity: float = 1.0


@dataclass
class TraceConfig:
    max_steps: int = 256
    eps_hit: float = 5e-5
    grazing_factor: float = 10.0
    scene_radius: float = 1.0
    sobel_tau: float = 1e-2


@dataclass
class EdgeWalkConfig:
    K: int = 16
    eps: float = 1e-3
    delta: float = 5e-2
    newton_steps: int = 3

    def __post_init__(self):
        if self.K < 1 or self.eps <= 0 or not 0 < self.delta < 1:
            raise ValueError(f"invalid edge walk config {self}")


@dataclass
class ShadeConfig:
    brdf: str = "roughplastic"  # or "plain"
    int_ior: float = 1.49
    ext_ior: float = 1.000277
    shading: str = "physical"  # or "constant" (known-color silhouette fitting)
    constant_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    edges: bool = True
    background: float = 0.0


@dataclass
class VolumeConfig:
    n_samples: int = 64
    n_importance: int = 64
    init_sharpness: float = 20.0
    rays_per_step: int = 512
    lambda_eikonal: float = 0.1
    lr: float = 5e-4
    lr_sharpness: float = 5e-3
    lambda_mask: float = 0.0  # BCE between opacity and the nonzero-pixel mask (black background only)
    mask_threshold: float = 1e-4


@dataclass
class TrainConfig:
    lambda_eikonal: float = 0.1
    lambda_roughness: float = 0.1
    patch_size: int = 128
    pyramid_levels: int = 4
    iters_stage1: int = 100_000
    iters_stage2: int = 50_000
    lr_fields: float = 5e-4
    lr_light: float = 1e-2
    lr_min_ratio: float = 0.05
    eikonal_uniform: int = 512
    eikonal_surface: int = 512
    tone_max: float = 4.0
    tone_gamma: float = 2.2
    ssim_weight: float = 1.0
    ssim_data_range: float = 1.0
    mask_misses: bool = True
    log_every: int = 1  # 0 logs only the last iteration
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_eikonal, self.lambda_roughness) < 0:
            raise ValueError("loss weights must be non-negative")
        p = self.patch_size
        if p < 1 or p & (p - 1) or p < 2 ** (self.pyramid_levels - 1):
            raise ValueError(f"patch_size {p} must be a power of two >= 2^(levels-1)")


@dataclass
class ExportConfig:
    grid_res: int = 256
    bounds: float = 1.2
    texture_res: int = 1024
    samples_per_texel: int = 4


@dataclass
class Config:
    field: FieldConfig = _field(default_factory=FieldConfig)
    trace: TraceConfig = _field(default_factory=TraceConfig)
    edges: EdgeWalkConfig = _field(default_factory=EdgeWalkConfig)
    shade: ShadeConfig = _field(default_factory=ShadeConfig)
    volume: VolumeConfig = _field(default_factory=VolumeConfig)
    train: TrainConfig = _field(default_factory=TrainConfig)
    export: ExportConfig = _field(default_factory=ExportConfig)
    profile: str = "paper"


def paper_profile() -> Config:
    return Config(profile="paper")


def desk_profile() -> Config:
    small = lambda skips=(2,): NetConfig(4, 64, skips)  # noqa: E731
    cfg = Config(
        field=FieldConfig(
            sdf=small(), diffuse=small(), specular=small(()), roughness=small(()), feature_dim=32
        ),
        # desk pixels are ~8-10x wider than full-resolution captures
        trace=TraceConfig(sobel_tau=0.1),
        edges=EdgeWalkConfig(K=16, eps=1e-2, delta=5e-2, newton_steps=3),
        volume=VolumeConfig(n_samples=48, n_importance=0, rays_per_step=256, lr=2e-3, lambda_mask=0.1),
        train=TrainConfig(patch_size=64, iters_stage1=5000, iters_stage2=3000, checkpoint_every=250),
        export=ExportConfig(grid_res=64, texture_res=256),
        profile="desk",
    )
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _merge(obj, data: dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(obj)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for name in known:
        current = getattr(obj, name)
        if name not in data:
            kwargs[name] = current
        elif dataclasses.is_dataclass(current):
            kwargs[name] = _merge(current, data[name], f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(data[name])
        else:
            kwargs[name] = data[name]
    return type(obj)(**kwargs)


def config_from_dict(data: dict[str, Any], profile: str | None = None) -> Config:
    """Overlay ``data`` onto a profile. Unknown keys are rejected."""
    profile = profile or data.get("profile", "desk")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    body = {k: v for k, v in data.items() if k != "profile"}
    return _merge(PROFILES[profile](), body, "config")


def config_to_dict(cfg: Config) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path, profile: str | None = None) -> Config:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    return config_from_dict(data, profile)
