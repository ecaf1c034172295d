"""Pointcloud integration into a submap.

Two modes share one ray caster and one update rule:

* ``simple`` casts every ray over its whole length (surface + truncation back
  to the sensor) and is the reference result.
* ``fast`` adds two early-termination rules backed by fixed-size lossy hash
  sets: a point is dropped if its half-voxel start cell was already used this
  frame, and a ray stops once it meets two consecutive voxels already touched
  by other rays. Rays are spread over worker threads and integration stops
  early when the per-frame time budget runs out.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import RigidTransform
from .tsdf import Submap, pack_keys

SET_CAPACITY = 1 << 20
BUDGET_CHECK_INTERVAL = 64


@dataclass
class IntegratorConfig:
    truncation: float | None = None  # meters; None = 4 voxels
    max_ray_length: float = 10.0
    max_weight: float = 10000.0
    thread_count: int = 1
    time_budget: float | None = None  # seconds; None = unlimited
    mode: str = "fast"

    def truncation_for(self, voxel_size: float) -> float:
        return 4.0 * voxel_size if self.truncation is None else float(self.truncation)

    def validate(self, voxel_size: float) -> None:
        if self.truncation_for(voxel_size) <= voxel_size:
            raise ValueError("truncation must exceed the voxel size")
        if self.max_weight <= 0:
            raise ValueError("max_weight must be positive")
        if self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")
        if self.mode not in ("simple", "fast"):
            raise ValueError(f"unknown integrator mode {self.mode!r}")


@dataclass
class IntegrationStats:
    rays_cast: int = 0
    points_discarded_rule1: int = 0
    rays_terminated_rule2: int = 0
    voxels_updated: int = 0
    blocks_allocated: int = 0
    elapsed_seconds: float = 0.0
    budget_exceeded: bool = False
    points_processed: int = 0
    points_out_of_range: int = 0

    def __iadd__(self, other: IntegrationStats) -> IntegrationStats:
        for name in self.__dataclass_fields__:
            if name == "budget_exceeded":
                self.budget_exceeded = self.budget_exceeded or other.budget_exceeded
            else:
                setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


class TerminationSet:
    """Fixed-size hash set, one element per bucket, collisions evict.

    ``insert`` is a single exchange on one int64 bucket, so concurrent
    inserts never block. Two threads racing on the same bucket may both see
    it as fresh; that only lets a redundant ray through.
    """

    def __init__(self, capacity: int = SET_CAPACITY):
        if capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two")
        self.buckets = np.full(capacity, K.EMPTY, dtype=np.int64)

    @property
    def capacity(self) -> int:
        return len(self.buckets)

    @staticmethod
    def key(index) -> int:
        x, y, z = (int(v) for v in index)
        return int(K.pack_index(x, y, z))

    def bucket(self, index) -> int:
        return int(K.bucket_of(self.key(index), self.capacity - 1))

    def insert(self, index) -> bool:
        return bool(K.set_exchange(self.buckets, np.int64(self.key(index))))

    def clear(self) -> None:
        self.buckets.fill(K.EMPTY)


def termination_set_insert(tset: TerminationSet, index) -> bool:
    """Insert a grid index; returns whether it was already present."""
    return tset.insert(index)


class Integrator:
    """Owns the termination sets so they are allocated once, not per frame."""

    def __init__(self, config: IntegratorConfig):
        self.config = config
        self.start_set = TerminationSet()
        self.observed_set = TerminationSet()
        self._pool: ThreadPoolExecutor | None = None

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.config.thread_count)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def integrate(
        self,
        submap: Submap,
        points: np.ndarray,
        colors: np.ndarray | None,
        T_submap_camera: RigidTransform,
        mode: str | None = None,
    ) -> IntegrationStats:
        cfg = self.config
        mode = mode or cfg.mode
        cfg.validate(submap.voxel_size)
        t0 = time.perf_counter()
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("pointcloud contains non-finite points")
        if colors is None:
            colors = np.zeros((len(points), 3), dtype=np.uint8)
        colors = np.ascontiguousarray(colors, dtype=np.uint8).reshape(-1, 3)
        stats = IntegrationStats()
        n = len(points)
        if n == 0:
            stats.elapsed_seconds = time.perf_counter() - t0
            return stats

        fast = mode == "fast"
        vs = submap.voxel_size
        tau = cfg.truncation_for(vs)
        pts = np.ascontiguousarray(T_submap_camera.apply(points))
        origin = np.ascontiguousarray(T_submap_camera.translation, dtype=np.float64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(K.ray_bounds(pts, origin, vs, tau), out=offsets[1:])
        out_vox = np.empty((offsets[-1], 3), dtype=np.int64)
        out_sdf = np.empty(offsets[-1], dtype=np.float64)
        counts = np.zeros(n, dtype=np.int64)
        status = np.zeros(n, dtype=np.int8)
        terminated = np.zeros(n, dtype=np.int8)
        if fast:
            self.start_set.clear()
            self.observed_set.clear()
        budget = cfg.time_budget
        n_chunks = math.ceil(n / BUDGET_CHECK_INTERVAL)
        workers = cfg.thread_count if fast else 1
        exceeded = [False] * workers

        def work(wid: int) -> None:
            for c in range(wid, n_chunks, workers):
                if budget is not None and time.perf_counter() - t0 >= budget:
                    exceeded[wid] = True
                    return
                lo = c * BUDGET_CHECK_INTERVAL
                hi = min(n, lo + BUDGET_CHECK_INTERVAL)
                K.traverse(
                    pts, origin, vs, tau, cfg.max_ray_length, lo, hi, offsets,
                    out_vox, out_sdf, counts, status, terminated,
                    self.start_set.buckets, self.observed_set.buckets, fast, fast,
                )

        if workers == 1:
            work(0)
        else:
            list(self._executor().map(work, range(workers)))

        vox, sdf, ray = K.compact(offsets, counts, out_vox, out_sdf)
        stats.budget_exceeded = any(exceeded)
        stats.points_processed = int(np.count_nonzero(status))
        stats.rays_cast = int(np.count_nonzero(status == K.CAST))
        stats.points_discarded_rule1 = int(np.count_nonzero(status == K.DISCARDED_START))
        stats.points_out_of_range = int(np.count_nonzero(status == K.SKIPPED_RANGE))
        stats.rays_terminated_rule2 = int(np.count_nonzero(terminated))
        stats.voxels_updated = len(sdf)
        if len(sdf):
            B = submap.block_size
            bidx = np.floor_divide(vox, B)
            local = vox - bidx * B
            lin = local[:, 0] + B * (local[:, 1] + B * local[:, 2])
            ukeys, inv = np.unique(pack_keys(bidx), return_inverse=True)
            uslots, n_new = submap.ensure_blocks(ukeys)
            stats.blocks_allocated = n_new
            slots = uslots[inv.reshape(-1)]
            dist, weight, color = submap.pools
            owners = workers if len(sdf) > 50000 else 1

            def apply(owner: int) -> None:
                K.apply_updates(
                    dist, weight, color, slots, lin, sdf, ray, colors,
                    tau, cfg.max_weight, owners, owner,
                )

            if owners == 1:
                apply(0)
            else:
                list(self._executor().map(apply, range(owners)))
        stats.elapsed_seconds = time.perf_counter() - t0
        return stats


def integrate_simple(submap, points, colors, T_submap_camera, cfg: IntegratorConfig):
    return Integrator(cfg).integrate(submap, points, colors, T_submap_camera, mode="simple")


def integrate_fast(submap, points, colors, T_submap_camera, cfg: IntegratorConfig):
    return Integrator(cfg).integrate(submap, points, colors, T_submap_camera, mode="fast")
