"""Sparse block-hashed TSDF storage.

Voxel ``v`` covers ``[v * voxel_size, (v + 1) * voxel_size)`` per axis and its
sample position is the cell center. Blocks are cubes of ``block_size`` voxels;
inside a block, voxels are addressed by the linear index ``x + B * (y + B * z)``.
All block payloads live in pooled arrays indexed by a slot number so compiled
kernels can update them without touching Python objects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from . import _kernels
from .geometry import RigidTransform

MAGIC = b"CBLX"
FORMAT_VERSION = 1

_KEY_OFFSET = 1 << 20
_KEY_MASK = (1 << 21) - 1

VOXEL_DTYPE = np.dtype([("distance", "<f4"), ("weight", "<f4"), ("color", "u1", (3,))])


def pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack integer 3-index rows into sortable int64 keys."""
    idx = np.asarray(idx, dtype=np.int64) + _KEY_OFFSET
    return (idx[..., 0] << 42) | (idx[..., 1] << 21) | idx[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return (
        np.stack([(keys >> 42) & _KEY_MASK, (keys >> 21) & _KEY_MASK, keys & _KEY_MASK], axis=-1)
        - _KEY_OFFSET
    )


@dataclass(frozen=True)
class TsdfVoxel:
    distance: float
    weight: float
    color: tuple[int, int, int]


class Submap:
    """One TSDF subvolume: a block-hashed voxel grid with its own frame ``T_GM``."""

    def __init__(
        self,
        id: int = 0,
        frame: RigidTransform | None = None,
        voxel_size: float = 0.02,
        block_size: int = 16,
        anchor_keyframe: int | None = None,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.id = id
        self.frame = frame if frame is not None else RigidTransform.identity()
        self.voxel_size = float(voxel_size)
        self.block_size = int(block_size)
        self.anchor_keyframe = anchor_keyframe
        self.contributing_keyframes: list[int] = []
        n = self.block_size**3
        self._slots: dict[tuple[int, int, int], int] = {}
        self._dist = np.zeros((8, n), dtype=np.float32)
        self._weight = np.zeros((8, n), dtype=np.float32)
        self._color = np.zeros((8, n, 3), dtype=np.uint8)
        self._lookup: tuple[np.ndarray, np.ndarray] | None = None

    # -- storage --------------------------------------------------------

    @property
    def voxels_per_block(self) -> int:
        return self.block_size**3

    @property
    def block_extent(self) -> float:
        return self.block_size * self.voxel_size

    def block_count(self) -> int:
        return len(self._slots)

    def block_indices(self) -> list[tuple[int, int, int]]:
        return sorted(self._slots)

    def has_block(self, index) -> bool:
        return tuple(index) in self._slots

    def slot(self, index) -> int | None:
        return self._slots.get(tuple(int(i) for i in index))

    def allocate_block(self, index) -> int:
        index = tuple(int(i) for i in index)
        slot = self._slots.get(index)
        if slot is not None:
            return slot
        slot = len(self._slots)
        if slot >= self._dist.shape[0]:
            self._grow(2 * self._dist.shape[0])
        self._slots[index] = slot
        self._lookup = None
        return slot

    def _grow(self, capacity: int) -> None:
        n = self.voxels_per_block
        for name, shape, dtype in (
            ("_dist", (capacity, n), np.float32),
            ("_weight", (capacity, n), np.float32),
            ("_color", (capacity, n, 3), np.uint8),
        ):
            old = getattr(self, name)
            new = np.zeros(shape, dtype=dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def ensure_blocks(self, keys: np.ndarray) -> tuple[np.ndarray, int]:
        """Slots for packed block keys, allocating missing blocks. Returns (slots, n_new)."""
        before = len(self._slots)
        slots = np.empty(len(keys), dtype=np.int64)
        for k, idx in enumerate(unpack_keys(keys)):
            slots[k] = self.allocate_block(idx)
        return slots, len(self._slots) - before

    def block_data(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views (distance, weight, color) shaped (B, B, B[, 3]) indexed [x, y, z]."""
        slot = self._slots[tuple(index)]
        B = self.block_size
        d = self._dist[slot].reshape(B, B, B).transpose(2, 1, 0)
        w = self._weight[slot].reshape(B, B, B).transpose(2, 1, 0)
        c = self._color[slot].reshape(B, B, B, 3).transpose(2, 1, 0, 3)
        return d, w, c

    @property
    def pools(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._dist, self._weight, self._color

    def _sorted_lookup(self) -> tuple[np.ndarray, np.ndarray]:
        if self._lookup is None:
            if self._slots:
                idx = np.array(list(self._slots.keys()), dtype=np.int64)
                slots = np.array(list(self._slots.values()), dtype=np.int64)
                keys = pack_keys(idx)
                order = np.argsort(keys)
                self._lookup = (keys[order], slots[order])
            else:
                self._lookup = (np.empty(0, np.int64), np.empty(0, np.int64))
        return self._lookup

    def lookup_voxels(self, vidx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Slot (-1 when unallocated) and in-block linear index for voxel index rows."""
        vidx = np.asarray(vidx, dtype=np.int64).reshape(-1, 3)
        B = self.block_size
        bidx = np.floor_divide(vidx, B)
        local = vidx - bidx * B
        lin = local[:, 0] + B * (local[:, 1] + B * local[:, 2])
        keys, slots = self._sorted_lookup()
        q = pack_keys(bidx)
        pos = np.searchsorted(keys, q)
        pos_c = np.minimum(pos, max(len(keys) - 1, 0))
        found = (pos < len(keys)) & (keys[pos_c] == q) if len(keys) else np.zeros(len(q), bool)
        slot = np.where(found, slots[pos_c] if len(keys) else -1, -1)
        return slot, lin

    def sample_voxels(self, vidx: np.ndarray):
        """(distance, weight, color, allocated) arrays for voxel index rows."""
        slot, lin = self.lookup_voxels(vidx)
        ok = slot >= 0
        s = np.where(ok, slot, 0)
        if self._slots:
            d = np.where(ok, self._dist[s, lin], 0.0)
            w = np.where(ok, self._weight[s, lin], 0.0)
            c = np.where(ok[:, None], self._color[s, lin], 0)
        else:
            d = np.zeros(len(slot))
            w = np.zeros(len(slot))
            c = np.zeros((len(slot), 3), dtype=np.uint8)
        return d, w, c, ok

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def voxel_center(self, vidx: np.ndarray) -> np.ndarray:
        return (np.asarray(vidx, dtype=np.float64) + 0.5) * self.voxel_size

    # -- queries ----------------------------------------------------------

    def voxel_at(self, point) -> TsdfVoxel | None:
        d, w, c, ok = self.sample_voxels(self.voxel_index(np.asarray(point).reshape(1, 3)))
        if not ok[0]:
            return None
        return TsdfVoxel(float(d[0]), float(w[0]), tuple(int(x) for x in c[0]))

    def interpolate_many(self, points: np.ndarray):
        """Vectorized trilinear interpolation over voxel centers.

        Returns (distance, weight, color, valid). A sample is valid when every
        stencil corner with a nonzero interpolation weight is allocated and
        observed (weight > 0). Queries that land on a voxel center (to 1e-6
        voxel) collapse onto that single voxel. Invalid rows are zeroed.
        """
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        dist = np.zeros(n)
        weight = np.zeros(n)
        color = np.zeros((n, 3), dtype=np.uint8)
        valid = np.zeros(n, dtype=bool)
        keys, slots = self._sorted_lookup()
        if n and len(keys):
            _kernels.trilinear(
                points, self.voxel_size, self.block_size, keys, slots,
                self._dist, self._weight, self._color, dist, weight, color, valid,
            )
        return dist, weight, color, valid

    def interpolate(self, point):
        """(distance, weight, color) at a submap-frame point, or None."""
        d, w, c, ok = self.interpolate_many(np.asarray(point).reshape(1, 3))
        if not ok[0]:
            return None
        return float(d[0]), float(w[0]), tuple(int(x) for x in c[0])

    def observed_voxels(self):
        """Global voxel indices and payloads of every voxel with weight > 0."""
        out_idx, out_d, out_w, out_c = [], [], [], []
        B = self.block_size
        local = np.stack(
            np.meshgrid(np.arange(B), np.arange(B), np.arange(B), indexing="ij"), -1
        ).reshape(-1, 3)[:, ::-1]  # row k has lin index k: x fastest
        for idx in self.block_indices():
            slot = self._slots[idx]
            w = self._weight[slot]
            m = w > 0
            out_idx.append(np.asarray(idx) * B + local[m])
            out_d.append(self._dist[slot][m])
            out_w.append(w[m])
            out_c.append(self._color[slot][m])
        if not out_idx:
            return (np.empty((0, 3), np.int64), np.empty(0, np.float32),
                    np.empty(0, np.float32), np.empty((0, 3), np.uint8))
        return (np.concatenate(out_idx), np.concatenate(out_d),
                np.concatenate(out_w), np.concatenate(out_c))

    def copy(self) -> Submap:
        other = Submap(self.id, self.frame, self.voxel_size, self.block_size, self.anchor_keyframe)
        other.contributing_keyframes = list(self.contributing_keyframes)
        other._slots = dict(self._slots)
        other._dist = self._dist.copy()
        other._weight = self._weight.copy()
        other._color = self._color.copy()
        return other

    def __repr__(self) -> str:
        return (
            f"Submap(id={self.id}, blocks={self.block_count()}, "
            f"voxel_size={self.voxel_size}, anchor={self.anchor_keyframe})"
        )


def voxel_at(submap: Submap, point) -> TsdfVoxel | None:
    return submap.voxel_at(point)


def interpolate(submap: Submap, point):
    return submap.interpolate(point)


def block_count(submap: Submap) -> int:
    return submap.block_count()


# -- binary serialization ----------------------------------------------------

_HEADER = struct.Struct("<4sIdI7dQ")
_BLOCK_INDEX = struct.Struct("<3i")


def write_submap(fh: BinaryIO, submap: Submap) -> None:
    """Little-endian record: header, then per block its index and B^3 voxels."""
    fh.write(
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            submap.voxel_size,
            submap.block_size,
            *submap.frame.to_xyzquat(),
            submap.block_count(),
        )
    )
    n = submap.voxels_per_block
    rec = np.empty(n, dtype=VOXEL_DTYPE)
    for idx in submap.block_indices():
        slot = submap.slot(idx)
        fh.write(_BLOCK_INDEX.pack(*idx))
        rec["distance"] = submap._dist[slot]
        rec["weight"] = submap._weight[slot]
        rec["color"] = submap._color[slot]
        fh.write(rec.tobytes())


def read_submap(fh: BinaryIO, id: int = 0) -> Submap:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated submap header")
    magic, version, voxel_size, block_size, *rest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported submap format version {version}")
    frame = RigidTransform.from_xyzquat(rest[:7])
    n_blocks = rest[7]
    submap = Submap(id, frame, voxel_size, block_size)
    n = submap.voxels_per_block
    nbytes = n * VOXEL_DTYPE.itemsize
    for _ in range(n_blocks):
        idx = _BLOCK_INDEX.unpack(fh.read(_BLOCK_INDEX.size))
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise ValueError("truncated block payload")
        rec = np.frombuffer(buf, dtype=VOXEL_DTYPE)
        slot = submap.allocate_block(idx)
        submap._dist[slot] = rec["distance"]
        submap._weight[slot] = rec["weight"]
        submap._color[slot] = rec["color"]
    return submap


def save_submaps(path: str | Path, submaps: Iterable[Submap]) -> None:
    with open(path, "wb") as fh:
        for s in submaps:
            write_submap(fh, s)


def load_submaps(path: str | Path) -> list[Submap]:
    out = []
    with open(path, "rb") as fh:
        while True:
            pos = fh.tell()
            if not fh.read(1):
                break
            fh.seek(pos)
            out.append(read_submap(fh, id=len(out)))
    return out
