"""GGX microfacet BRDFs: a roughplastic-style layered model and a plain one.

The layered model puts a GGX specular lobe (scaled by the specular albedo)
over a diffuse base that light reaches through a smooth dielectric
interface on the way in and on the way out. Rough-interface transmittance
tables are replaced by the smooth Fresnel transmittance 1 - F.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.integrate import quad


@dataclass
class BrdfParams:
    diffuse: torch.Tensor  # (..., 3)
    specular: torch.Tensor  # (..., 3)
    roughness: torch.Tensor  # (...,)
    int_ior: float = 1.49
    ext_ior: float = 1.000277

    def __post_init__(self):
        if not self.int_ior > self.ext_ior >= 1.0:
            raise ValueError("need int_ior > ext_ior >= 1")

    @property
    def eta(self) -> float:
        return self.int_ior / self.ext_ior


def fresnel_dielectric(cos_i, eta):
    """Unpolarized Fresnel reflectance for light arriving from the outside.

    Accepts tensors or numpy arrays; ``eta`` < 1 models the inside view.
    """
    if not isinstance(cos_i, torch.Tensor):
        return fresnel_dielectric(torch.as_tensor(cos_i, dtype=torch.float64), eta).numpy()
    sin_t2 = (1.0 - cos_i**2) / eta**2
    cos_t = torch.sqrt(torch.clamp(1.0 - sin_t2, min=0.0))
    rs = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    rp = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    F = 0.5 * (rs**2 + rp**2)
    return torch.where(sin_t2 >= 1.0, torch.ones_like(F), F)


@lru_cache(maxsize=None)
def internal_diffuse_reflectance(eta: float) -> float:
    """Hemispherical average of the Fresnel reflectance seen from inside."""
    val, _ = quad(lambda t: float(fresnel_dielectric(np.cos(t), 1.0 / eta)) * 2.0 * np.cos(t) * np.sin(t), 0.0, math.pi / 2, limit=200)
    return val


def ggx_d(cos_h, a):
    a2 = a * a
    c2 = cos_h * cos_h
    return a2 / (math.pi * (c2 * (a2 - 1.0) + 1.0) ** 2)


def smith_g1(cos_v, a):
    c = torch.clamp(cos_v, min=1e-9)
    tan2 = (1.0 - c * c) / (c * c)
    return 2.0 / (1.0 + torch.sqrt(1.0 + a * a * tan2))


def eval_brdf(p: BrdfParams, wo: torch.Tensor, wi: torch.Tensor, n: torch.Tensor, model: str = "roughplastic"):
    """f_r(wo, wi) without the cosine factor; zero below the horizon."""
    cos_o = (wo * n).sum(-1)
    cos_i = (wi * n).sum(-1)
    h = wo + wi
    h = h / torch.linalg.norm(h, dim=-1, keepdim=True).clamp_min(1e-12)
    cos_h = (h * n).sum(-1)
    a = p.roughness
    co = torch.clamp(cos_o, min=1e-9)
    ci = torch.clamp(cos_i, min=1e-9)
    DG = ggx_d(cos_h, a) * smith_g1(cos_o, a) * smith_g1(cos_i, a)
    if model == "plain":
        value = p.diffuse / math.pi + p.specular * (DG / (4.0 * co * ci))[..., None]
    elif model == "roughplastic":
        eta = p.eta
        F = fresnel_dielectric((wi * h).sum(-1).clamp(0.0, 1.0), eta)
        spec = p.specular * (F * DG / (4.0 * co * ci))[..., None]
        t_in = 1.0 - fresnel_dielectric(ci.clamp(max=1.0), eta)
        t_out = 1.0 - fresnel_dielectric(co.clamp(max=1.0), eta)
        fdr = internal_diffuse_reflectance(eta)
        diff = p.diffuse / (1.0 - fdr) * (t_in * t_out / (math.pi * eta * eta))[..., None]
        value = spec + diff
    else:
        raise ValueError(f"unknown BRDF model {model!r}")
    front = (cos_o > 0) & (cos_i > 0)
    return torch.where(front[..., None], value, torch.zeros_like(value))


def diffuse_scale(int_ior: float = 1.49, ext_ior: float = 1.000277, model: str = "roughplastic") -> float:
    """Head-on collocated diffuse response relative to albedo / pi."""
    if model == "plain":
        return 1.0
    eta = int_ior / ext_ior
    t = 1.0 - float(fresnel_dielectric(np.float64(1.0), eta))
    return t * t / (eta * eta * (1.0 - internal_diffuse_reflectance(eta)))
