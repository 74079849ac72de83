"""Pinhole cameras (OpenCV convention: x right, y down, z forward).

Pixel (i, j) covers [i, i+1) x [j, j+1); its center is (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import DTYPE


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (3, 4): [R | t], R columns are camera axes in world

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(3, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        R = self.cam_to_world[:, :3]
        if not np.all(np.isfinite(self.cam_to_world)):
            raise ValueError("camera pose must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), width=64, height=64, fov_deg=40.0, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(width, height, f, f * 1.0, width / 2, height / 2, np.concatenate([R, eye[:, None]], axis=1))

    @property
    def R(self) -> torch.Tensor:
        return torch.tensor(self.cam_to_world[:, :3], dtype=DTYPE)

    @property
    def origin(self) -> torch.Tensor:
        return torch.tensor(self.cam_to_world[:, 3], dtype=DTYPE)

    @property
    def forward(self) -> torch.Tensor:
        return self.R[:, 2]

    def directions(self, uv: torch.Tensor) -> torch.Tensor:
        """Unit world-space ray directions through subpixel coordinates."""
        uv = torch.as_tensor(uv, dtype=DTYPE)
        local = torch.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, torch.ones_like(uv[..., 0])], dim=-1
        )
        d = local @ self.R.T
        return d / torch.linalg.norm(d, dim=-1, keepdim=True)

    def rays(self, uv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        d = self.directions(uv)
        return self.origin.expand_as(d), d

    def to_camera(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.origin) @ self.R

    def project(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """World points to (uv, z-depth). Differentiable in ``x``."""
        p = self.to_camera(x)
        z = p[..., 2]
        uv = torch.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], dim=-1)
        return uv, z

    def project_direction(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Image-plane differential J(x) v of the projection at ``x``."""
        p = self.to_camera(x)
        q = v @ self.R
        z = p[..., 2]
        du = self.fx * (q[..., 0] * z - p[..., 0] * q[..., 2]) / z**2
        dv = self.fy * (q[..., 1] * z - p[..., 1] * q[..., 2]) / z**2
        return torch.stack([du, dv], dim=-1)

    def unproject(self, uv: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`project` for a z-depth."""
        uv = torch.as_tensor(uv, dtype=DTYPE)
        local = torch.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, torch.ones_like(uv[..., 0])], dim=-1
        )
        return (local * depth[..., None]) @ self.R.T + self.origin

    def pixel_centers(self, x0=0, y0=0, w=None, h=None) -> torch.Tensor:
        """(h, w, 2) grid of pixel-center coordinates for a window."""
        w = self.width - x0 if w is None else w
        h = self.height - y0 if h is None else h
        u = torch.arange(x0, x0 + w, dtype=DTYPE) + 0.5
        v = torch.arange(y0, y0 + h, dtype=DTYPE) + 0.5
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        return torch.stack([uu, vv], dim=-1)

    def to_dict(self) -> dict:
        return {
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "cam_to_world": [float(v) for v in self.cam_to_world.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["cam_to_world"], dtype=np.float64).reshape(3, 4),
        )
