"""Rigid transforms, pinhole cameras and depth back-projection.

Quaternions are Hamilton, stored (w, x, y, z). A transform ``T_AB`` maps
points expressed in frame B into frame A: ``p_A = R_AB p_B + t_AB``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # canonical hemisphere keeps serialized poses reproducible
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; robust for every rotation angle."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta**2) * K @ K
    )


def quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, *(0.5 * omega)]))
    axis = omega / theta
    return quat_normalize(np.array([np.cos(theta / 2), *(np.sin(theta / 2) * axis)]))


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * v / s


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): unit quaternion (w, x, y, z) plus translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = quat_normalize(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> RigidTransform:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_axis_angle(cls, omega, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(quat_from_axis_angle(omega), translation)

    @classmethod
    def from_xyzquat(cls, values) -> RigidTransform:
        """Build from ``tx ty tz qx qy qz qw`` (the on-disk order)."""
        tx, ty, tz, qx, qy, qz, qw = (float(v) for v in values)
        return cls(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))

    def to_xyzquat(self) -> tuple[float, ...]:
        w, x, y, z = self.rotation
        return (*map(float, self.translation), float(x), float(y), float(z), float(w))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (3,) or (N, 3) from the source frame into the target frame."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def inverse(self) -> RigidTransform:
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        return RigidTransform(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.rotation[1:]), abs(self.rotation[0])))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        same_q = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(
            self.rotation, -other.rotation, atol=atol
        )
        return same_q and np.allclose(self.translation, other.translation, atol=atol)

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(q={q}, t={t})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ⊕ b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.rotation_matrix @ b.translation + a.translation
    return RigidTransform(q, t)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def relative_transform(T_GA: RigidTransform, T_GB: RigidTransform) -> RigidTransform:
    """``T_AB = T_GA^-1 ⊕ T_GB``."""
    return compose(T_GA.inverse(), T_GB)


def pose_difference(old: RigidTransform, new: RigidTransform) -> tuple[float, float]:
    """Translation norm and rotation angle of ``old^-1 ⊕ new``."""
    delta = relative_transform(old, new)
    return float(np.linalg.norm(delta.translation)), delta.angle()


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        return quat_normalize(q0 + s * (q1 - q0))
    theta = np.arccos(dot)
    return quat_normalize((np.sin((1 - s) * theta) * q0 + np.sin(s * theta) * q1) / np.sin(theta))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose for an optical frame (z forward, x right, y down)."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(matrix_to_quat(np.column_stack([x, y, z])), position)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> PinholeCamera:
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-frame rays (z = 1) for every pixel, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points."""
        points = np.atleast_2d(points)
        z = points[:, 2]
        return np.column_stack(
            [self.fx * points[:, 0] / z + self.cx, self.fy * points[:, 1] / z + self.cy]
        )


@dataclass(frozen=True, eq=False)
class DepthFrame:
    depth: np.ndarray  # (H, W) meters, NaN = invalid
    color: np.ndarray  # (H, W, 3) uint8
    camera: PinholeCamera
    timestamp: float = 0.0
    max_range: float = 10.0

    def __post_init__(self) -> None:
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError("depth shape does not match camera resolution")
        finite = self.depth[np.isfinite(self.depth)]
        if finite.size and (finite.min() <= 0.0 or finite.max() > self.max_range):
            raise ValueError("finite depths must lie in (0, max_range]")


def depth_to_pointcloud(frame: DepthFrame) -> tuple[np.ndarray, np.ndarray]:
    """Back-project every finite depth pixel; returns (points (N, 3), colors (N, 3))."""
    cam = frame.camera
    valid = np.isfinite(frame.depth)
    v, u = np.nonzero(valid)
    d = frame.depth[valid].astype(np.float64)
    points = np.column_stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d])
    return points, frame.color[valid].astype(np.uint8)
