"""Covisibility-driven detection and fusion of redundant submaps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels
from .geometry import relative_transform
from .sparse.covariance import IllConditionedPairError, NotPositiveDefiniteError
from .sparse.graph import FactorGraph
from .submaps import SubmapCollection
from .tsdf import Submap, pack_keys, unpack_keys

log = logging.getLogger(__name__)

BLOCK_BATCH = 256


@dataclass
class CovisibilityGraph:
    vertices: list[int] = field(default_factory=list)
    edges: dict[tuple[int, int], int] = field(default_factory=dict)

    def weight(self, i: int, j: int) -> int:
        return self.edges.get((min(i, j), max(i, j)), 0)


@dataclass
class FusionPolicy:
    min_covisibility: int = 20
    min_quality: float = 400.0  # 1 / (0.05 m)^2
    max_weight: float = 1e4

    def __post_init__(self) -> None:
        if self.min_covisibility <= 0 or self.min_quality <= 0:
            raise ValueError("fusion thresholds must be positive")


@dataclass(frozen=True)
class FusionEvent:
    kept: int
    removed: int
    covisibility: int
    quality: float

    def log_line(self) -> str:
        return f"FUSE kept={self.kept} removed={self.removed} W={self.covisibility} q={self.quality:.6g}"


def landmark_sets(coll: SubmapCollection, graph: FactorGraph) -> dict[int, set[int]]:
    out = {}
    for s in coll:
        ids: set[int] = set()
        for k in s.contributing_keyframes:
            if k not in graph.keyframes:
                raise KeyError(f"submap {s.id}: keyframe {k} not in graph")
            ids |= graph.keyframes[k].landmark_ids()
        out[s.id] = ids
    return out


def build_covisibility(coll: SubmapCollection, graph: FactorGraph) -> CovisibilityGraph:
    sets = landmark_sets(coll, graph)
    ids = sorted(sets)
    edges = {}
    for i, j in combinations(ids, 2):
        w = len(sets[i] & sets[j])
        if w:
            edges[i, j] = w
    return CovisibilityGraph(ids, edges)


def quality(i: int, j: int, backend) -> float:
    """Reciprocal spectral norm of the conditional covariance of keyframe ``i`` given ``j``.

    Any failure to produce a well-conditioned covariance yields 0.
    """
    try:
        cov = backend.conditional_covariance(i, j)
    except (IllConditionedPairError, NotPositiveDefiniteError, KeyError, ValueError) as exc:
        log.debug("quality(%s, %s) unavailable: %s", i, j, exc)
        return 0.0
    norm = np.linalg.norm(cov, 2)
    if not np.isfinite(norm):
        return 0.0
    return float("inf") if norm == 0 else float(1.0 / norm)


def _candidate_blocks(dst: Submap, src: Submap, T_dst_src) -> np.ndarray:
    """Dst block indices touched by each src block's transformed, dilated box."""
    src_blocks = np.array(src.block_indices(), dtype=np.int64)
    if len(src_blocks) == 0:
        return np.empty((0, 3), dtype=np.int64)
    ext = src.block_extent
    corners = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")).reshape(3, -1).T
    pts = (src_blocks[:, None, :] + corners[None]) * ext  # (n, 8, 3)
    pts = T_dst_src.apply(pts.reshape(-1, 3)).reshape(-1, 8, 3)
    lo = pts.min(axis=1) - dst.voxel_size
    hi = pts.max(axis=1) + dst.voxel_size
    blo = np.floor(lo / dst.block_extent).astype(np.int64)
    bhi = np.floor(hi / dst.block_extent).astype(np.int64)
    span = bhi - blo + 1
    out = []
    for shape in np.unique(span, axis=0):
        sel = np.all(span == shape, axis=1)
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(-1, 3)
        out.append((blo[sel][:, None, :] + grid[None]).reshape(-1, 3))
    return unpack_keys(np.unique(pack_keys(np.concatenate(out))))


def fuse_submaps(dst: Submap, src: Submap, max_weight: float = 1e4) -> Submap:
    """Resample ``src`` onto ``dst``'s lattice and merge it in place (gather direction)."""
    if not np.isclose(dst.voxel_size, src.voxel_size, rtol=0, atol=1e-12) or dst.block_size != src.block_size:
        raise ValueError("cannot fuse submaps with different voxel or block sizes")
    T_dst_src = relative_transform(dst.frame, src.frame)
    T_src_dst = T_dst_src.inverse()
    B = dst.block_size
    local = np.stack(np.meshgrid(np.arange(B), np.arange(B), np.arange(B), indexing="ij"), -1)
    local = local.reshape(-1, 3)[:, ::-1]  # row k has in-block linear index k
    lin = np.arange(B**3, dtype=np.int64)
    blocks = _candidate_blocks(dst, src, T_dst_src)
    for start in range(0, len(blocks), BLOCK_BATCH):
        batch = blocks[start : start + BLOCK_BATCH]
        vidx = (batch[:, None, :] * B + local[None]).reshape(-1, 3)
        centers = T_src_dst.apply(dst.voxel_center(vidx))
        d, w, c, ok = src.interpolate_many(centers)
        ok &= w > 0
        if not ok.any():
            continue
        which = np.repeat(np.arange(len(batch)), B**3)[ok]
        used = np.unique(which)
        slot_of = np.full(len(batch), -1, dtype=np.int64)
        for b in used:
            slot_of[b] = dst.allocate_block(batch[b])
        dist, weight, color = dst.pools
        _kernels.merge_samples(
            dist, weight, color,
            slot_of[which], np.tile(lin, len(batch))[ok],
            d[ok].astype(np.float64), w[ok].astype(np.float64), c[ok].astype(np.uint8),
            float(max_weight),
        )
    for k in src.contributing_keyframes:
        if k not in dst.contributing_keyframes:
            dst.contributing_keyframes.append(k)
    return dst


def select_and_fuse(
    coll: SubmapCollection,
    graph: FactorGraph,
    policy: FusionPolicy,
    backend,
    covisibility: CovisibilityGraph | None = None,
) -> list[FusionEvent]:
    """One greedy round: strongest covisibility first, each submap used at most once."""
    cov = covisibility if covisibility is not None else build_covisibility(coll, graph)
    candidates = sorted(
        ((w, i, j) for (i, j), w in cov.edges.items() if w >= policy.min_covisibility),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    consumed: set[int] = set()
    events = []
    for w, i, j in candidates:
        if i in consumed or j in consumed or i not in coll.submaps or j not in coll.submaps:
            continue
        a, b = coll[i], coll[j]
        if a.anchor_keyframe is None or b.anchor_keyframe is None:
            continue
        q = quality(a.anchor_keyframe, b.anchor_keyframe, backend)
        if q < policy.min_quality:
            continue
        # the older submap survives unless the younger one is still being integrated
        kept, removed = (j, i) if j == coll.active_id else (i, j)
        fuse_submaps(coll[kept], coll[removed], policy.max_weight)
        coll.remove(removed)
        consumed |= {i, j}
        ev = FusionEvent(kept, removed, int(w), q)
        log.info(ev.log_line())
        events.append(ev)
    return events


def collapse_all(coll: SubmapCollection, max_weight: float = 1e4) -> Submap:
    """Fuse every submap, in id order, into a copy of the first."""
    ids = sorted(coll.submaps)
    if not ids:
        raise ValueError("cannot collapse an empty collection")
    out = coll[ids[0]].copy()
    for sid in ids[1:]:
        fuse_submaps(out, coll[sid], max_weight)
    return out
