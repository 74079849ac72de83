"""PFM images, 16-bit PNGs and the on-disk dataset layout.

A dataset directory holds ``cameras.json`` (a list of camera records with
``width, height, fx, fy, cx, cy`` and ``cam_to_world`` as 12 row-major
numbers) and ``images/view_%04d.pfm`` in linear RGB.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .camera import Camera
from .checkpoint import atomic_write_bytes
from .field import DTYPE


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top per the format."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (h, w) or (h, w, 3), got {img.shape}")
    h, w = img.shape[:2]
    header = tag + b"\n%d %d\n-1.0\n" % (w, h)
    atomic_write_bytes(path, header + np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, offset=m.end(), count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_png16(path: str | Path, img: np.ndarray) -> None:
    """Values in [0, 1] to a 16-bit PNG (RGB or gray)."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = np.round(img * 65535.0).astype(np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]  # cv2 stores BGR
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"could not write {path}")


def read_png16(path: str | Path) -> np.ndarray:
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise OSError(f"could not read {path}")
    if q.ndim == 3:
        q = q[..., ::-1]
    return q.astype(np.float64) / (65535.0 if q.dtype == np.uint16 else 255.0)


def preview_png(path: str | Path, img: np.ndarray, gamma: float = 2.2) -> None:
    write_png16(path, np.clip(img, 0.0, 1.0) ** (1.0 / gamma))


@dataclass
class CaptureView:
    camera: Camera
    image_path: Path
    _image: torch.Tensor | None = field(default=None, repr=False)

    @property
    def image(self) -> torch.Tensor:
        if self._image is None:
            self._image = torch.from_numpy(read_pfm(self.image_path).astype(np.float64)).to(DTYPE)
        return self._image


@dataclass
class Dataset:
    root: Path
    views: list[CaptureView]

    def __len__(self) -> int:
        return len(self.views)

    def split(self, seed: int, train_fraction: float = 0.7) -> tuple[list[int], list[int]]:
        """Deterministic random train/held-out split of view indices."""
        order = np.random.default_rng(seed).permutation(len(self.views))
        k = int(round(train_fraction * len(self.views)))
        return sorted(order[:k].tolist()), sorted(order[k:].tolist())


def save_dataset(root: str | Path, cameras: list[Camera], images: list[np.ndarray]) -> Dataset:
    root = Path(root)
    if not cameras:
        raise ValueError("a dataset needs at least one view")
    if len(cameras) != len(images):
        raise ValueError("one image per camera is required")
    (root / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        path = root / "images" / f"view_{i:04d}.pfm"
        write_pfm(path, img)
        views.append(CaptureView(cam, path))
    atomic_write_bytes(root / "cameras.json", json.dumps([c.to_dict() for c in cameras], indent=1).encode())
    return Dataset(root, views)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "cameras.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    records = json.loads(path.read_text())
    if not isinstance(records, list) or not records:
        raise ValueError(f"{path}: expected a non-empty list of cameras")
    views = []
    for i, rec in enumerate(records):
        cam = Camera.from_dict(rec)
        img = root / "images" / f"view_{i:04d}.pfm"
        if not img.exists():
            raise FileNotFoundError(f"{img} not found")
        views.append(CaptureView(cam, img))
    sizes = {(v.camera.width, v.camera.height) for v in views}
    if len(sizes) != 1:
        raise ValueError(f"{path}: views have different image sizes {sorted(sizes)}")
    return Dataset(root, views)
