"""Binary parameter checkpoints.

Layout (all little-endian)::

    magic        8 bytes   b"PSDFCKPT"
    version      u32       1
    cfg_len      u32       length of the UTF-8 JSON field config that follows
    cfg_json     bytes
    num_blocks   u32
    per block:
        name_len u16, name bytes (UTF-8)
        num_arrays u32
        per array: ndim u32, dims u32 * ndim
    payload      float64 values of every array, blocks in declaration order

Blocks are the four nets (each layer contributes a weight [out, in] and a
bias [out] array), then ``light`` ([1]), then any extra named scalars or
vectors (e.g. stage-1 sharpness). Writes go to a temp file and are renamed
into place.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .config import FieldConfig, NetConfig
from .field import DTYPE, FieldStack

MAGIC = b"PSDFCKPT"
VERSION = 1


def _blocks(stack: FieldStack) -> list[tuple[str, list[tuple[int, ...]]]]:
    blocks = []
    for name, net in stack.nets.items():
        shapes: list[tuple[int, ...]] = []
        for o, i in net.shapes:
            shapes += [(o, i), (o,)]
        blocks.append((name, shapes))
    blocks.append(("light", [(1,)]))
    return blocks


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, stack: FieldStack, extras: dict[str, torch.Tensor] | None = None) -> None:
    extras = extras or {}
    cfg_json = json.dumps(dataclasses.asdict(stack.cfg)).encode()
    blocks = _blocks(stack) + [(k, [tuple(torch.as_tensor(v).reshape(-1).shape)]) for k, v in extras.items()]
    head = bytearray(MAGIC)
    head += struct.pack("<II", VERSION, len(cfg_json)) + cfg_json
    head += struct.pack("<I", len(blocks))
    for name, shapes in blocks:
        raw = name.encode()
        head += struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(shapes))
        for shp in shapes:
            head += struct.pack("<I", len(shp)) + struct.pack(f"<{len(shp)}I", *shp)
    values = [stack.params.detach().to(DTYPE).numpy()]
    values += [torch.as_tensor(v, dtype=DTYPE).detach().reshape(-1).numpy() for v in extras.values()]
    payload = np.concatenate(values).astype("<f8").tobytes()
    atomic_write_bytes(path, bytes(head) + payload)


def _field_config(data: dict) -> FieldConfig:
    nets = {k: NetConfig(v["num_layers"], v["width"], tuple(v["skips"])) for k, v in data.items() if isinstance(v, dict)}
    rest = {k: v for k, v in data.items() if not isinstance(v, dict)}
    return FieldConfig(**nets, **rest)


def load_checkpoint(path: str | Path) -> tuple[FieldStack, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, cfg_len = struct.unpack_from("<II", raw, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = _field_config(json.loads(raw[pos : pos + cfg_len]))
    pos += cfg_len
    (nblocks,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = []
    for _ in range(nblocks):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        (narr,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shapes = []
        for _ in range(narr):
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shapes.append(struct.unpack_from(f"<{ndim}I", raw, pos))
            pos += 4 * ndim
        blocks.append((name, shapes))
    values = np.frombuffer(raw, dtype="<f8", offset=pos)
    stack = FieldStack(cfg)
    expected = _blocks(stack)
    if [(n, [tuple(s) for s in shp]) for n, shp in blocks[: len(expected)]] != expected:
        raise ValueError(f"{path}: layer shapes do not match the stored field config")
    n = stack.params.numel()
    stack.params = torch.tensor(values[:n].copy(), dtype=DTYPE)
    extras = {}
    cursor = n
    for name, shapes in blocks[len(expected) :]:
        size = int(np.prod(shapes[0]))
        extras[name] = torch.tensor(values[cursor : cursor + size].copy(), dtype=DTYPE)
        cursor += size
    if cursor != values.size:
        raise ValueError(f"{path}: payload length mismatch")
    return stack, extras
