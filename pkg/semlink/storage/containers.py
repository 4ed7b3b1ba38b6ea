"""Little-endian binary containers.

SLNN  network weights: magic, version u32, entry count u32, then per entry
      name length u32, utf-8 name, rank u32, rank x u64 extents, f64 payload.
      Names under ``meta/`` hold rank-0 metadata scalars.
SLCH  channel datasets: magic, version, region id, count, K, L, Nr, Nt (u32),
      then per sample the f32 re/im interleaved grid and a UserState record
      (x, y, speed km/h, heading rad as f64).
SLSC  scene datasets: magic, version, count, image size, seg size, classes,
      then per scene the f32 image [3][S][S], u8 seg map, u32 object count
      and per object shape/class u8 plus centre x, y and size as f32.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

VERSION = 1
META_PREFIX = "meta/"


class ContainerError(ValueError):
    pass


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self._buf = io.BytesIO(raw)
        self._path = path

    def take(self, n: int) -> bytes:
        chunk = self._buf.read(n)
        if len(chunk) != n:
            raise ContainerError(f"{self._path}: truncated (wanted {n} bytes, got {len(chunk)})")
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()

    def at_end(self) -> bool:
        return self._buf.read(1) == b""


def _open(path: Path, magic: bytes) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise ContainerError(f"{path}: no such file") from e
    r = _Reader(raw, Path(path))
    got = r.take(4)
    if got != magic:
        raise ContainerError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    return r


# ---- SLNN --------------------------------------------------------------------

def write_weights(path: Path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = io.BytesIO()
    out.write(b"SLNN")
    out.write(struct.pack("<II", VERSION, len(arrays)))
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<I", value.ndim))
        for extent in value.shape:
            out.write(struct.pack("<Q", extent))
        out.write(np.ascontiguousarray(value).tobytes())
    path.write_bytes(out.getvalue())
    return path


def read_weights(path: Path) -> Dict[str, np.ndarray]:
    r = _open(path, b"SLNN")
    count = r.u32()
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        if name in arrays:
            raise ContainerError(f"{path}: duplicate entry {name!r}")
        arrays[name] = r.array("<f8", shape)
    if not r.at_end():
        raise ContainerError(f"{path}: trailing bytes after {count} entries")
    return arrays


def split_meta(arrays: Mapping[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    params = {k: v for k, v in arrays.items() if not k.startswith(META_PREFIX)}
    meta = {k[len(META_PREFIX):]: float(v) for k, v in arrays.items() if k.startswith(META_PREFIX)}
    return params, meta


# ---- SLCH --------------------------------------------------------------------

def write_channel_dataset(path: Path, region_id: int, h: np.ndarray, users: np.ndarray) -> Path:
    """``h`` is complex [n][K][L][Nr][Nt]; ``users`` is [n][4] (x, y, speed, heading)."""
    h = np.asarray(h)
    users = np.asarray(users, dtype="<f8").reshape(len(h), 4)
    if h.ndim != 5:
        raise ContainerError(f"channel payload must be rank 5, got shape {h.shape}")
    n, K, L, Nr, Nt = h.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = io.BytesIO()
    out.write(b"SLCH")
    out.write(struct.pack("<7I", VERSION, region_id, n, K, L, Nr, Nt))
    interleaved = np.empty(h.shape + (2,), dtype="<f4")
    interleaved[..., 0] = h.real
    interleaved[..., 1] = h.imag
    for i in range(n):
        out.write(interleaved[i].tobytes())
        out.write(users[i].tobytes())
    path.write_bytes(out.getvalue())
    return path


def read_channel_dataset(path: Path) -> Tuple[int, np.ndarray, np.ndarray]:
    r = _open(path, b"SLCH")
    region_id, n, K, L, Nr, Nt = (r.u32() for _ in range(6))
    h = np.empty((n, K, L, Nr, Nt), dtype=np.complex128)
    users = np.empty((n, 4))
    for i in range(n):
        pair = r.array("<f4", (K, L, Nr, Nt, 2)).astype(np.float64)
        h[i] = pair[..., 0] + 1j * pair[..., 1]
        users[i] = r.array("<f8", (4,))
    if not r.at_end():
        raise ContainerError(f"{path}: trailing bytes after {n} samples")
    return region_id, h, users


# ---- SLSC --------------------------------------------------------------------

@dataclass
class SceneRecord:
    image: np.ndarray
    seg: np.ndarray
    objects: List[Tuple[int, int, float, float, float]]


def write_scene_dataset(path: Path, records: List[SceneRecord], n_classes: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = records[0].image.shape[-1] if records else 0
    seg_size = records[0].seg.shape[-1] if records else 0
    out = io.BytesIO()
    out.write(b"SLSC")
    out.write(struct.pack("<5I", VERSION, len(records), size, seg_size, n_classes))
    for rec in records:
        out.write(np.asarray(rec.image, dtype="<f4").tobytes())
        out.write(np.asarray(rec.seg, dtype="u1").tobytes())
        out.write(struct.pack("<I", len(rec.objects)))
        for shape, cls, cx, cy, extent in rec.objects:
            out.write(struct.pack("<BBfff", shape, cls, cx, cy, extent))
    path.write_bytes(out.getvalue())
    return path


def read_scene_dataset(path: Path) -> Tuple[List[SceneRecord], int]:
    r = _open(path, b"SLSC")
    count, size, seg_size, n_classes = (r.u32() for _ in range(4))
    records: List[SceneRecord] = []
    for _ in range(count):
        image = r.array("<f4", (3, size, size)).astype(np.float64)
        seg = r.array("u1", (seg_size, seg_size)).astype(np.int64)
        objects = [struct.unpack("<BBfff", r.take(struct.calcsize("<BBfff"))) for _ in range(r.u32())]
        records.append(SceneRecord(image=image, seg=seg, objects=objects))
    if not r.at_end():
        raise ContainerError(f"{path}: trailing bytes after {count} scenes")
    return records, n_classes
