"""Analytic scenes standing in for a real sensor and a feature-based tracker.

Scenes are unions of infinite planes, spheres and axis-aligned boxes. They
render depth/color frames, expose closed-form surface distance for
evaluation, and carry a fixed set of surface landmarks so repeated visits
re-observe the same landmark ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .geometry import (
    DepthFrame,
    PinholeCamera,
    RigidTransform,
    compose,
    look_at,
    slerp,
)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    color: tuple[int, int, int] = (180, 180, 180)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.normal = _unit(self.normal)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origin) @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)

    def distance(self, pts):
        return np.abs((pts - self.point) @ self.normal)

    def sample_surface(self, spacing, lo, hi, rng):
        n = self.normal
        a = np.eye(3)[np.argmin(np.abs(n))]
        u = _unit(np.cross(n, a))
        v = np.cross(n, u)
        half = np.linalg.norm(hi - lo)
        center = self.point + ((0.5 * (lo + hi) - self.point) @ u) * u + ((0.5 * (lo + hi) - self.point) @ v) * v
        g = np.arange(-half, half + 1e-9, spacing)
        a_, b_ = np.meshgrid(g, g, indexing="ij")
        a_ = a_.ravel() + rng.uniform(-0.25, 0.25, a_.size) * spacing
        b_ = b_.ravel() + rng.uniform(-0.25, 0.25, b_.size) * spacing
        pts = center + a_[:, None] * u + b_[:, None] * v
        inside = np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)
        return pts[inside]


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple[int, int, int] = (200, 80, 80)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def distance(self, pts):
        return np.abs(np.linalg.norm(pts - self.center, axis=1) - self.radius)

    def sample_surface(self, spacing, lo, hi, rng):
        n = max(8, int(round(4 * math.pi * self.radius**2 / spacing**2)))
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        theta = math.pi * (1 + 5**0.5) * k + rng.uniform(-0.1, 0.1, n)
        d = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
        return self.center + self.radius * d


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    color: tuple[int, int, int] = (80, 160, 80)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def intersect(self, origin, dirs):
        lo = self.center - self.half_extents
        hi = self.center + self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tn = np.max(np.minimum(t1, t2), axis=1)
        tf = np.min(np.maximum(t1, t2), axis=1)
        hit = tf >= np.maximum(tn, 0)
        t = np.where(tn > 1e-9, tn, tf)
        return np.where(hit & (t > 1e-9), t, np.inf)

    def distance(self, pts):
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0)
        return np.abs(outside + inside)

    def sample_surface(self, spacing, lo, hi, rng):
        pts = []
        for axis in range(3):
            for sign in (-1, 1):
                n = np.zeros(3)
                n[axis] = sign
                face = Plane(self.center + sign * self.half_extents[axis] * n, n)
                flo = self.center - self.half_extents
                fhi = self.center + self.half_extents
                pts.append(face.sample_surface(spacing, flo, fhi, rng))
        return np.concatenate(pts)


Primitive = Plane | Sphere | Box


@dataclass
class AnalyticScene:
    primitives: list
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    landmark_spacing: float = 0.25
    landmark_seed: int = 7

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if self.bounds is not None:
            self.bounds = (np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit distance along unit ``dirs`` and the primitive index (-1 = miss)."""
        ts = np.stack([p.intersect(origin, dirs) for p in self.primitives])
        which = np.argmin(ts, axis=0)
        t = ts[which, np.arange(dirs.shape[0])]
        return t, np.where(np.isfinite(t), which, -1)

    def distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.min(np.stack([p.distance(points) for p in self.primitives]), axis=0)

    def _bounds(self):
        if self.bounds is not None:
            return self.bounds
        lo, hi = np.full(3, -5.0), np.full(3, 5.0)
        return lo, hi

    @cached_property
    def landmarks(self) -> np.ndarray:
        """Jittered surface samples; row index is the landmark id."""
        rng = np.random.default_rng(self.landmark_seed)
        lo, hi = self._bounds()
        pts = [p.sample_surface(self.landmark_spacing, lo, hi, rng) for p in self.primitives]
        pts = np.concatenate(pts)
        # keep samples that lie on the visible union surface
        return pts[self.distance(pts) < 1e-6]

    @cached_property
    def landmark_priority(self) -> np.ndarray:
        return np.random.default_rng(self.landmark_seed + 1).permutation(len(self.landmarks))


def render_frame(
    scene: AnalyticScene,
    camera: PinholeCamera,
    T_G_camera: RigidTransform,
    max_range: float = 10.0,
    timestamp: float = 0.0,
) -> DepthFrame:
    rays = camera.pixel_rays().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    dirs_c = rays / norms[:, None]
    dirs_g = dirs_c @ T_G_camera.rotation_matrix.T
    t, which = scene.intersect(T_G_camera.translation, dirs_g)
    depth = t / norms
    depth = np.where(np.isfinite(depth) & (depth <= max_range), depth, np.nan)
    palette = np.array([p.color for p in scene.primitives] + [(0, 0, 0)], dtype=np.uint8)
    color = palette[np.where(np.isfinite(depth), which, -1)]
    shape = (camera.height, camera.width)
    return DepthFrame(depth.reshape(shape), color.reshape(shape + (3,)), camera, timestamp, max_range)


def visible_landmarks(
    scene: AnalyticScene, camera: PinholeCamera, T_G_camera: RigidTransform, max_range: float = 10.0
) -> np.ndarray:
    """Ids of landmarks inside the image, within range and not occluded."""
    pts = scene.landmarks
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    pc = T_G_camera.inverse().apply(pts)
    z = pc[:, 2]
    ok = z > 1e-3
    uv = np.full((len(pts), 2), -1.0)
    uv[ok] = camera.project(pc[ok])
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= camera.width - 1)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height - 1)
    rng_ = np.linalg.norm(pc, axis=1)
    ok &= rng_ <= max_range
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return idx
    dirs = (pts[idx] - T_G_camera.translation) / rng_[idx, None]
    t, _ = scene.intersect(T_G_camera.translation, dirs)
    return idx[t >= rng_[idx] - 1e-6]


def generate_observations(
    scene: AnalyticScene,
    T_G_keyframe: RigidTransform,
    camera: PinholeCamera,
    landmark_budget: int,
    seed: int,
    noise_sigma: float = 0.0,
    max_range: float = 10.0,
) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Visible landmarks (strongest ``landmark_budget`` by a fixed priority) as noisy
    keyframe-frame points with their covariance."""
    ids = visible_landmarks(scene, camera, T_G_keyframe, max_range)
    ids = ids[np.argsort(scene.landmark_priority[ids], kind="stable")][:landmark_budget]
    ids = np.sort(ids)
    T_KG = T_G_keyframe.inverse()
    # row-by-row so measurements match residual evaluation bit for bit
    pc = [T_KG.apply(scene.landmarks[i]) for i in ids]
    cov = np.eye(3) * max(noise_sigma, 1e-3) ** 2
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(ids), 3)) * noise_sigma
    return [(int(i), pc[k] + noise[k], cov.copy()) for k, i in enumerate(ids)]


# -- trajectories and drift -------------------------------------------------------


@dataclass
class TrajectoryScript:
    waypoints: list[tuple[float, RigidTransform]]
    frame_rate: float = 10.0
    keyframe_every: int = 1

    def __post_init__(self):
        times = [t for t, _ in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        if self.keyframe_every < 1:
            raise ValueError("keyframe_every must be >= 1")

    def times(self) -> np.ndarray:
        t0, t1 = self.waypoints[0][0], self.waypoints[-1][0]
        n = int(math.floor((t1 - t0) * self.frame_rate + 1e-9)) + 1
        return t0 + np.arange(n) / self.frame_rate

    def pose_at(self, t: float) -> RigidTransform:
        wps = self.waypoints
        if t <= wps[0][0]:
            return wps[0][1]
        for (ta, A), (tb, B) in zip(wps, wps[1:]):
            if t <= tb:
                s = (t - ta) / (tb - ta)
                return RigidTransform(
                    slerp(A.rotation, B.rotation, s),
                    (1 - s) * A.translation + s * B.translation,
                )
        return wps[-1][1]

    def poses(self) -> list[RigidTransform]:
        return [self.pose_at(t) for t in self.times()]

    def is_keyframe(self, frame_index: int) -> bool:
        return frame_index % self.keyframe_every == 0


@dataclass
class DriftModel:
    translation_per_frame: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation_per_frame: np.ndarray = field(default_factory=lambda: np.zeros(3))
    loop_closures: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.translation_per_frame = np.asarray(self.translation_per_frame, dtype=np.float64)
        self.rotation_per_frame = np.asarray(self.rotation_per_frame, dtype=np.float64)
        if not (np.all(np.isfinite(self.translation_per_frame))
                and np.all(np.isfinite(self.rotation_per_frame))):
            raise ValueError("drift must be finite")


def apply_drift(
    true_poses: Sequence[RigidTransform],
    model: DriftModel,
    keyframe_ids: Sequence[int] | None = None,
) -> tuple[list[RigidTransform], list[tuple[int, dict[int, RigidTransform]]]]:
    """Emulate odometry drift and delayed loop closures.

    Drift accumulates per frame as ``D_i = step^k`` (applied on the global
    side) with ``k`` frames since the last correction. A loop closure at
    frame ``E`` emits the true poses of every keyframe up to ``E`` and
    restarts accumulation from there.
    """
    step = RigidTransform.from_axis_angle(model.rotation_per_frame, model.translation_per_frame)
    kf_set = set(range(len(true_poses))) if keyframe_ids is None else set(keyframe_ids)
    closures = sorted(set(model.loop_closures))
    drifted, events = [], []
    D = RigidTransform.identity()
    for i, T in enumerate(true_poses):
        if i in closures:
            D = RigidTransform.identity()
            events.append((i, {k: true_poses[k] for k in sorted(kf_set) if k <= i}))
        elif i > 0:
            D = compose(step, D)
        drifted.append(compose(D, T))
    return drifted, events


# -- scenario files -----------------------------------------------------------------


@dataclass
class Scenario:
    scene: AnalyticScene | None
    camera: PinholeCamera
    trajectory: TrajectoryScript | None
    drift: DriftModel
    landmark_budget: int = 60
    noise_sigma: float = 0.0
    seed: int = 0
    max_range: float = 10.0
    dataset: Path | None = None
    loop_closures: list[int] = field(default_factory=list)


class ScenarioError(ValueError):
    pass


def _vec(x, n=3, name="value"):
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ScenarioError(f"{name} must have {n} components")
    return arr


def _primitive(spec: dict):
    kind = spec.get("type")
    color = tuple(int(c) for c in spec.get("color", (180, 180, 180)))
    if kind == "plane":
        return Plane(_vec(spec["point"], name="point"), _vec(spec["normal"], name="normal"), color)
    if kind == "sphere":
        return Sphere(_vec(spec["center"], name="center"), float(spec["radius"]), color)
    if kind == "box":
        return Box(_vec(spec["center"], name="center"), _vec(spec["half_extents"]), color)
    raise ScenarioError(f"unknown primitive type {kind!r}")


def _waypoint(spec: dict) -> tuple[float, RigidTransform]:
    t = float(spec["t"])
    if "pose" in spec:
        return t, RigidTransform.from_xyzquat(_vec(spec["pose"], 7, "pose"))
    pos = _vec(spec["position"], name="position")
    return t, look_at(pos, _vec(spec["look_at"], name="look_at"), spec.get("up", (0, 0, 1)))


def scenario_from_dict(doc: dict, base: Path | None = None) -> Scenario:
    try:
        cam = doc["camera"]
        if "hfov_deg" in cam:
            camera = PinholeCamera.from_fov(int(cam["width"]), int(cam["height"]), float(cam["hfov_deg"]))
        else:
            camera = PinholeCamera(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]),
                                   float(cam["cy"]), int(cam["width"]), int(cam["height"]))
        lm = doc.get("landmarks", {})
        scene = None
        if "primitives" in doc:
            bounds = doc.get("bounds")
            scene = AnalyticScene(
                [_primitive(p) for p in doc["primitives"]],
                (bounds["min"], bounds["max"]) if bounds else None,
                float(lm.get("spacing", 0.25)),
                int(lm.get("seed", 7)),
            )
        traj = None
        if "trajectory" in doc:
            tr = doc["trajectory"]
            traj = TrajectoryScript(
                [_waypoint(w) for w in tr["waypoints"]],
                float(tr.get("frame_rate", 10.0)),
                int(tr.get("keyframe_every", 1)),
            )
        dr = doc.get("drift", {})
        drift = DriftModel(
            dr.get("translation_per_frame", (0, 0, 0)),
            dr.get("rotation_per_frame", (0, 0, 0)),
            [int(f) for f in dr.get("loop_closures", [])],
        )
        dataset = doc.get("dataset")
        if dataset is not None:
            dataset = Path(dataset)
            if base is not None and not dataset.is_absolute():
                dataset = base / dataset
        if dataset is None and (scene is None or traj is None):
            raise ScenarioError("a scenario needs primitives and a trajectory, or a dataset")
        return Scenario(
            scene, camera, traj, drift,
            landmark_budget=int(lm.get("budget", 60)),
            noise_sigma=float(lm.get("noise_sigma", 0.0)),
            seed=int(doc.get("seed", 0)),
            max_range=float(doc.get("max_range", 10.0)),
            dataset=dataset,
            loop_closures=list(drift.loop_closures),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping at top level")
    return scenario_from_dict(doc, path.parent)


# -- on-disk datasets ---------------------------------------------------------------


def write_depth_image(path: str | Path, depth: np.ndarray) -> None:
    """Text header ``width height`` then row-major little-endian float32 depths."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(np.asarray(depth, dtype="<f4").tobytes())


def read_depth_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 2:
            raise ValueError(f"{path}: bad depth header")
        w, h = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} depths, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_tum(path: str | Path, stamps: Sequence[float], poses: Sequence[RigidTransform]) -> None:
    lines = [
        " ".join([repr(float(t))] + [repr(v) for v in T.to_xyzquat()]) for t, T in zip(stamps, poses)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path: str | Path) -> tuple[list[float], list[RigidTransform]]:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: TUM lines need 8 fields")
        stamps.append(float(parts[0]))
        poses.append(RigidTransform.from_xyzquat(parts[1:]))
    return stamps, poses
