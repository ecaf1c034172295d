"""End-to-end runs: frames in, submaps + mesh + metrics out."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import PipelineConfig
from .fusion import FusionEvent, build_covisibility, collapse_all, select_and_fuse
from .geometry import DepthFrame, RigidTransform, depth_to_pointcloud, pose_difference
from .integrator import IntegrationStats, Integrator
from .meshing import TriMesh, extract_mesh, surface_error, write_ply
from .sparse import FactorGraph, SparseBackend, solve_gauss_newton
from .submaps import SubmapCollection, save_collection, should_spawn
from .tsdf import Submap
from .world import (
    Scenario,
    apply_drift,
    generate_observations,
    read_depth_image,
    read_tum,
    render_frame,
)

log = logging.getLogger(__name__)

REPORT_NAME = "report.txt"
TIMING_NAME = "timing.txt"
MESH_NAME = "mesh.ply"


@dataclass
class FrameRecord:
    index: int
    frame: DepthFrame
    T_G_camera: RigidTransform  # tracker estimate, possibly drifted
    keyframe: bool
    observations: list = field(default_factory=list)
    corrections: dict[int, RigidTransform] | None = None  # loop closure fired at this frame


def synthetic_frames(sc: Scenario) -> Iterator[FrameRecord]:
    traj = sc.trajectory
    times = traj.times()
    true = traj.poses()
    kf_ids = [i for i in range(len(true)) if traj.is_keyframe(i)]
    drifted, events = apply_drift(true, sc.drift, kf_ids)
    events = dict(events)
    for i, (t, T_true, T_est) in enumerate(zip(times, true, drifted)):
        frame = render_frame(sc.scene, sc.camera, T_true, sc.max_range, float(t))
        obs = []
        if i in kf_ids:
            obs = generate_observations(
                sc.scene, T_true, sc.camera, sc.landmark_budget,
                seed=sc.seed * 1_000_003 + i, noise_sigma=sc.noise_sigma, max_range=sc.max_range,
            )
        yield FrameRecord(i, frame, T_est, i in kf_ids, obs, events.get(i))


def dataset_frames(sc: Scenario) -> Iterator[FrameRecord]:
    """Frames from disk: ``poses.txt`` (TUM), ``depth/<index>.depth``,
    ``observations.txt`` (graph snapshot: keyframe ids are frame indices) and
    optional ``loop_<index>.txt`` correction tables (TUM, timestamp = keyframe id)."""
    from .sparse import read_snapshot

    root = Path(sc.dataset)
    stamps, poses = read_tum(root / "poses.txt")
    obs_path = root / "observations.txt"
    snap = read_snapshot(obs_path) if obs_path.exists() else FactorGraph()
    for i, (t, T) in enumerate(zip(stamps, poses)):
        depth = read_depth_image(root / "depth" / f"{i:06d}.depth")
        if depth.shape != (sc.camera.height, sc.camera.width):
            raise ValueError(f"frame {i}: depth size does not match the camera")
        depth = np.where(depth > 0, depth, np.nan)
        color = np.full(depth.shape + (3,), 128, dtype=np.uint8)
        frame = DepthFrame(depth, color, sc.camera, t, sc.max_range)
        kf = snap.keyframes.get(i)
        obs = [(o.landmark, o.measurement, o.covariance) for o in kf.observations] if kf else []
        corr = None
        loop = root / f"loop_{i:06d}.txt"
        if loop.exists():
            ids, cposes = read_tum(loop)
            corr = {int(k): p for k, p in zip(ids, cposes)}
        yield FrameRecord(i, frame, T, kf is not None, obs, corr)


@dataclass
class RunResult:
    collection: SubmapCollection
    graph: FactorGraph
    mesh: TriMesh
    rmse: float
    median: float
    frames: int
    keyframes: int
    loop_closures: int
    fusions: list[FusionEvent]
    frame_times: dict[str, list[float]]
    stats: IntegrationStats
    evaluated: bool

    def total_blocks(self) -> int:
        return self.collection.total_blocks()


class Mapper:
    """Frame-by-frame orchestration of integration, keyframes, loop closures and fusion."""

    def __init__(self, cfg: PipelineConfig):
        cfg.validate()
        self.cfg = cfg
        self.coll = SubmapCollection(cfg.voxel_size, cfg.block_size)
        self.graph = FactorGraph()
        self.integrator = Integrator(cfg.integrator)
        self.kf_in_active = 0
        self.pending_jump = (0.0, 0.0)
        self.fusions: list[FusionEvent] = []
        self.frames = 0
        self.keyframes = 0
        self.loop_closures = 0
        self.stats = IntegrationStats()
        self.frame_times: dict[str, list[float]] = {cfg.integrator.mode: []}
        self.shadow: Submap | None = None
        if cfg.compare_integrators:
            other = "simple" if cfg.integrator.mode == "fast" else "fast"
            self.frame_times[other] = []
            self.shadow = Submap(-1, RigidTransform.identity(), cfg.voxel_size, cfg.block_size)

    # -- sparse side -------------------------------------------------------------

    def _add_keyframe(self, rec: FrameRecord) -> None:
        kid = rec.index
        T_KG = rec.T_G_camera.inverse()
        kf = self.graph.add_keyframe(kid, T_KG, fixed=not self.graph.keyframes)
        for lid, meas, cov in rec.observations:
            kf.observe(lid, meas, cov)
            if lid not in self.graph.landmarks:
                self.graph.add_landmark(lid, rec.T_G_camera.apply(np.asarray(meas)))
        self.keyframes += 1

    def _loop_closure(self, corrections: dict[int, RigidTransform]) -> None:
        self.loop_closures += 1
        for kid, T_GK in corrections.items():
            if kid in self.graph.keyframes:
                self.graph.keyframes[kid].pose = T_GK.inverse()
        if self.cfg.naive or not self.graph.keyframes:
            return
        if len(self.graph.keyframes) > 1 and self.graph.landmarks:
            # re-seed landmarks from the corrected poses before refining everything jointly
            for lid, pos in self._first_sightings().items():
                self.graph.landmarks[lid].position = pos
            self.graph, ok = solve_gauss_newton(
                self.graph, self.cfg.solver.max_iterations, self.cfg.solver.tolerance
            )
            if not ok:
                log.warning("graph solve stopped before converging")
        active_before = self.coll.active.frame if self.coll.active_id is not None else None
        poses = {k: kf.pose.inverse() for k, kf in self.graph.keyframes.items()}
        self.coll.update_poses(poses)
        if active_before is not None:
            self.pending_jump = pose_difference(active_before, self.coll.active.frame)
        if self.cfg.fusion_enabled and len(self.coll) > 1:
            backend = SparseBackend(self.graph)
            cov = build_covisibility(self.coll, self.graph)
            self.fusions += select_and_fuse(self.coll, self.graph, self.cfg.fusion, backend, cov)

    def _first_sightings(self) -> dict[int, np.ndarray]:
        out = {}
        for kid in sorted(self.graph.keyframes):
            kf = self.graph.keyframes[kid]
            T_GK = kf.pose.inverse()
            for o in kf.observations:
                if o.landmark not in out:
                    out[o.landmark] = T_GK.apply(o.measurement)
        return out

    # -- dense side ---------------------------------------------------------------

    def _maybe_spawn(self, rec: FrameRecord) -> None:
        if self.cfg.naive:
            if self.coll.active_id is None:
                self.coll.spawn(rec.index, RigidTransform.identity())
            return
        if should_spawn(self.coll, self.cfg.spawn, self.kf_in_active, self.pending_jump):
            self.coll.spawn(rec.index, rec.T_G_camera)
            self.kf_in_active = 0
            self.pending_jump = (0.0, 0.0)

    def process(self, rec: FrameRecord) -> None:
        if rec.corrections is not None:
            self._loop_closure(rec.corrections)
        if rec.keyframe:
            self._add_keyframe(rec)
            self._maybe_spawn(rec)
            self.coll.add_keyframe(rec.index)
            self.kf_in_active += 1
        elif self.coll.active_id is None:
            self._maybe_spawn(rec)
        points, colors = depth_to_pointcloud(rec.frame)
        t0 = time.perf_counter()
        self.stats += self.coll.integrate_points(points, colors, rec.T_G_camera, self.integrator)
        self.frame_times[self.cfg.integrator.mode].append(time.perf_counter() - t0)
        if self.shadow is not None:
            other = next(m for m in self.frame_times if m != self.cfg.integrator.mode)
            t0 = time.perf_counter()
            self.integrator.integrate(self.shadow, points, colors, rec.T_G_camera, mode=other)
            self.frame_times[other].append(time.perf_counter() - t0)
        self.frames += 1

    def finish(self, truth=None) -> RunResult:
        self.integrator.close()
        if len(self.coll):
            merged = collapse_all(self.coll, self.cfg.integrator.max_weight)
            mesh = extract_mesh(merged, global_frame=True)
        else:
            mesh = TriMesh()
        rmse = median = 0.0
        evaluated = truth is not None and not mesh.is_empty
        if evaluated:
            err = surface_error(mesh, truth)
            rmse, median = err.rmse, err.median
        return RunResult(
            self.coll, self.graph, mesh, rmse, median, self.frames, self.keyframes,
            self.loop_closures, self.fusions, self.frame_times, self.stats, evaluated,
        )


def run_scenario(sc: Scenario, cfg: PipelineConfig, max_frames: int | None = None) -> RunResult:
    mapper = Mapper(cfg)
    frames = dataset_frames(sc) if sc.dataset is not None else synthetic_frames(sc)
    for rec in frames:
        if max_frames is not None and rec.index >= max_frames:
            break
        mapper.process(rec)
    return mapper.finish(sc.scene)


# -- reporting ----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def report_lines(res: RunResult) -> list[str]:
    """Deterministic key=value metrics followed by the fusion log."""
    coll = res.collection
    lines = [
        f"rmse={_fmt(res.rmse)}",
        f"median={_fmt(res.median)}",
        f"evaluated={int(res.evaluated)}",
        f"frames={res.frames}",
        f"keyframes={res.keyframes}",
        f"loop_closures={res.loop_closures}",
        f"submaps_created={coll.created}",
        f"submaps_final={len(coll)}",
        f"fusions={len(res.fusions)}",
        f"total_blocks={coll.total_blocks()}",
    ]
    for sid in sorted(coll.submaps):
        lines.append(f"blocks_submap_{sid}={coll[sid].block_count()}")
    lines += [
        f"mesh_vertices={len(res.mesh.vertices)}",
        f"mesh_triangles={len(res.mesh.triangles)}",
        f"rays_cast={res.stats.rays_cast}",
        f"voxels_updated={res.stats.voxels_updated}",
    ]
    lines += [ev.log_line() for ev in res.fusions]
    return lines


def timing_lines(res: RunResult) -> list[str]:
    out = []
    means = {}
    for mode in sorted(res.frame_times):
        ts = res.frame_times[mode]
        means[mode] = 1e3 * float(np.mean(ts)) if ts else 0.0
        out.append(f"mean_ms_per_frame_{mode}={means[mode]:.3f}")
    if "fast" in means and "simple" in means and means["fast"] > 0:
        out.append(f"speedup_simple_over_fast={means['simple'] / means['fast']:.3f}")
    return out


def write_outputs(res: RunResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_collection(out, res.collection)
    write_ply(out / MESH_NAME, res.mesh)
    (out / REPORT_NAME).write_text("\n".join(report_lines(res)) + "\n")
    (out / TIMING_NAME).write_text("\n".join(timing_lines(res)) + "\n")
    return out


def read_report(path: str | Path) -> tuple[dict[str, str], list[str]]:
    values, fuse = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("FUSE "):
            fuse.append(line)
        elif "=" in line:
            k, v = line.split("=", 1)
            values[k] = v
    return values, fuse


def export_dataset(sc: Scenario, directory: str | Path, max_frames: int | None = None) -> Path:
    """Write a synthetic scenario in the on-disk dataset layout read by ``dataset_frames``."""
    from .sparse import write_snapshot
    from .world import write_depth_image, write_tum

    root = Path(directory)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    snap = FactorGraph()
    stamps, poses = [], []
    for rec in synthetic_frames(sc):
        if max_frames is not None and rec.index >= max_frames:
            break
        write_depth_image(root / "depth" / f"{rec.index:06d}.depth", np.nan_to_num(rec.frame.depth, nan=0.0))
        stamps.append(rec.frame.timestamp)
        poses.append(rec.T_G_camera)
        if rec.keyframe:
            kf = snap.add_keyframe(rec.index, rec.T_G_camera.inverse(), fixed=not snap.keyframes)
            for lid, meas, cov in rec.observations:
                kf.observe(lid, meas, cov)
                if lid not in snap.landmarks:
                    snap.add_landmark(lid, rec.T_G_camera.apply(meas))
        if rec.corrections is not None:
            ids = sorted(rec.corrections)
            write_tum(root / f"loop_{rec.index:06d}.txt", ids, [rec.corrections[k] for k in ids])
    write_tum(root / "poses.txt", stamps, poses)
    write_snapshot(root / "observations.txt", snap)
    return root
