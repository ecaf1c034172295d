"""Keyframes, landmarks and 3D point observations.

A keyframe stores ``T_KG`` (global -> keyframe). An observation is a 3D point
measured in the keyframe frame, so the residual is
``e = m - (R_KG L + t_KG)``. Poses are perturbed on the left:
``R <- Exp(omega) R``, ``t <- t + rho`` with tangent ordered ``(omega, rho)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import RigidTransform, quat_to_matrix, skew, so3_exp, matrix_to_quat


class GraphError(ValueError):
    pass


@dataclass
class Observation:
    landmark: int
    measurement: np.ndarray  # (3,) keyframe frame
    covariance: np.ndarray  # (3, 3)


@dataclass
class Keyframe:
    id: int
    pose: RigidTransform  # T_KG
    observations: list[Observation] = field(default_factory=list)

    def observe(self, landmark: int, measurement, covariance=None) -> None:
        cov = np.eye(3) if covariance is None else np.asarray(covariance, dtype=np.float64)
        if cov.shape == (3,):
            cov = np.diag(cov)
        self.observations.append(
            Observation(int(landmark), np.asarray(measurement, dtype=np.float64), cov)
        )

    def landmark_ids(self) -> set[int]:
        return {o.landmark for o in self.observations}


@dataclass
class Landmark:
    id: int
    position: np.ndarray

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise GraphError(f"landmark {self.id} has a non-finite position")


@dataclass
class FactorGraph:
    keyframes: dict[int, Keyframe] = field(default_factory=dict)
    landmarks: dict[int, Landmark] = field(default_factory=dict)
    huber_delta: float = 1.345
    fixed_keyframes: set[int] = field(default_factory=set)

    def add_keyframe(self, id: int, pose: RigidTransform, fixed: bool = False) -> Keyframe:
        kf = Keyframe(id, pose)
        self.keyframes[id] = kf
        if fixed:
            self.fixed_keyframes.add(id)
        return kf

    def add_landmark(self, id: int, position) -> Landmark:
        lm = Landmark(id, position)
        self.landmarks[id] = lm
        return lm

    def free_keyframes(self) -> list[int]:
        return sorted(k for k in self.keyframes if k not in self.fixed_keyframes)

    def observed_landmarks(self) -> list[int]:
        ids = set()
        for kf in self.keyframes.values():
            ids |= kf.landmark_ids()
        return sorted(ids)

    def validate(self) -> None:
        for kf in self.keyframes.values():
            for o in kf.observations:
                if o.landmark not in self.landmarks:
                    raise GraphError(f"keyframe {kf.id} observes unknown landmark {o.landmark}")

    def copy(self) -> FactorGraph:
        return copy.deepcopy(self)

    def observation_arrays(self):
        """Flattened observations: (kf ids, lm ids, measurements, information matrices)."""
        kfs, lms, meas, info = [], [], [], []
        for kid in sorted(self.keyframes):
            for o in self.keyframes[kid].observations:
                kfs.append(kid)
                lms.append(o.landmark)
                meas.append(o.measurement)
                info.append(np.linalg.inv(o.covariance))
        if not kfs:
            return (np.empty(0, np.int64), np.empty(0, np.int64),
                    np.empty((0, 3)), np.empty((0, 3, 3)))
        return np.array(kfs), np.array(lms), np.array(meas), np.array(info)


def residual(kf: Keyframe, lm: Landmark, obs: Observation) -> np.ndarray:
    """``e = l_s - T_KG(L)``."""
    return obs.measurement - kf.pose.apply(lm.position)


def jacobians(kf: Keyframe, lm: Landmark) -> tuple[np.ndarray, np.ndarray]:
    """d e / d(omega, rho) (3x6) and d e / d L (3x3) at the current state."""
    R = kf.pose.rotation_matrix
    p_rot = R @ lm.position
    J_pose = np.hstack([skew(p_rot), -np.eye(3)])
    return J_pose, -R


def retract_pose(pose: RigidTransform, delta: np.ndarray) -> RigidTransform:
    R = so3_exp(delta[:3]) @ pose.rotation_matrix
    return RigidTransform(matrix_to_quat(R), pose.translation + delta[3:])


def huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weight for squared whitened residual norms ``s``."""
    r = np.sqrt(s)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def huber_cost(s: np.ndarray, delta: float) -> np.ndarray:
    r = np.sqrt(s)
    return np.where(r <= delta, s, 2.0 * delta * r - delta * delta)


def total_cost(graph: FactorGraph) -> float:
    kids, lids, meas, info = graph.observation_arrays()
    if len(kids) == 0:
        return 0.0
    e = _residuals(graph, kids, lids, meas)
    s = np.einsum("ni,nij,nj->n", e, info, e)
    return float(np.sum(huber_cost(s, graph.huber_delta)))


def _pose_arrays(graph: FactorGraph, kids: np.ndarray):
    rot = {k: quat_to_matrix(kf.pose.rotation) for k, kf in graph.keyframes.items()}
    R = np.array([rot[k] for k in kids])
    t = np.array([graph.keyframes[k].pose.translation for k in kids])
    return R, t


def _residuals(graph, kids, lids, meas):
    R, t = _pose_arrays(graph, kids)
    L = np.array([graph.landmarks[l].position for l in lids])
    return meas - (np.einsum("nij,nj->ni", R, L) + t)


# -- snapshot format -----------------------------------------------------------


def write_snapshot(path: str | Path, graph: FactorGraph) -> None:
    """Line-oriented text: KF, LM and OBS records (diagonal covariances)."""
    lines = []
    for kid in sorted(graph.keyframes):
        kf = graph.keyframes[kid]
        pose = " ".join(repr(v) for v in kf.pose.to_xyzquat())
        fixed = " FIXED" if kid in graph.fixed_keyframes else ""
        lines.append(f"KF {kid} {pose}{fixed}")
    for lid in sorted(graph.landmarks):
        x, y, z = (float(v) for v in graph.landmarks[lid].position)
        lines.append(f"LM {lid} {x!r} {y!r} {z!r}")
    for kid in sorted(graph.keyframes):
        for o in graph.keyframes[kid].observations:
            m = " ".join(repr(float(v)) for v in o.measurement)
            s = " ".join(repr(float(v)) for v in np.diag(o.covariance))
            lines.append(f"OBS {kid} {o.landmark} {m} {s}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path: str | Path, huber_delta: float = 1.345) -> FactorGraph:
    graph = FactorGraph(huber_delta=huber_delta)
    pending = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            tag = parts[0]
            if tag == "KF":
                fixed = len(parts) == 10 and parts[9] == "FIXED"
                if len(parts) != 9 and not fixed:
                    raise GraphError("KF record needs 8 fields plus optional FIXED")
                graph.add_keyframe(int(parts[1]), RigidTransform.from_xyzquat(parts[2:9]), fixed)
            elif tag == "LM":
                if len(parts) != 5:
                    raise GraphError("LM record needs 4 fields")
                graph.add_landmark(int(parts[1]), [float(v) for v in parts[2:5]])
            elif tag == "OBS":
                if len(parts) != 9:
                    raise GraphError("OBS record needs 8 fields")
                pending.append(parts)
            else:
                raise GraphError(f"unknown record {tag!r}")
        except (ValueError, GraphError) as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
    for parts in pending:
        kid, lid = int(parts[1]), int(parts[2])
        if kid not in graph.keyframes:
            raise GraphError(f"observation references unknown keyframe {kid}")
        vals = [float(v) for v in parts[3:9]]
        graph.keyframes[kid].observe(lid, vals[:3], np.diag(vals[3:]))
    graph.validate()
    return graph
