"""Rigid transforms and axis helpers.

World frame is right-handed and z-up. A :class:`Pose` maps sensor-frame
points into the world frame, ``p_world = R @ p_sensor + t``.
Rotations are held as unit quaternions ``(w, x, y, z)`` and renormalized
after every composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Direction(IntEnum):
    """Coordinate axis used as the regression target of a layer."""

    X = 0
    Y = 1
    Z = 2

    @property
    def unit(self) -> np.ndarray:
        e = np.zeros(3)
        e[int(self)] = 1.0
        return e

    @property
    def plane_axes(self) -> tuple[int, int]:
        """The two axes spanning the training-location plane, ascending."""
        return _PLANE_AXES[int(self)]


_PLANE_AXES = ((1, 2), (0, 2), (0, 1))
ALL_DIRECTIONS = frozenset(Direction)


def coord(p, d: Direction):
    """Component of ``p`` (or each row of an (N, 3) array) along ``d``."""
    return np.asarray(p, dtype=float)[..., int(d)]


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
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
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
    return _canonical(np.array(q))


def _canonical(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def so3_exp(omega) -> np.ndarray:
    """Quaternion of the rotation vector ``omega`` (radians)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    half = 0.5 * theta
    if theta < 1e-8:
        # second-order Taylor expansion of sin(x)/x
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    return _canonical(np.concatenate([[np.cos(half)], k * omega]))


def so3_log(q: np.ndarray) -> np.ndarray:
    q = _canonical(np.asarray(q, dtype=float))
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    return 2.0 * np.arctan2(s, q[0]) * v / s


@dataclass(frozen=True)
class Pose:
    """Rigid transform with unit-quaternion rotation and translation in meters."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _canonical(np.asarray(self.quat, dtype=float).reshape(4))
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> Pose:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_xyz_yaw(cls, x=0.0, y=0.0, z=0.0, yaw=0.0) -> Pose:
        return cls(so3_exp([0.0, 0.0, yaw]), [x, y, z])

    @classmethod
    def exp(cls, xi) -> Pose:
        """Pose from ``[rx, ry, rz, tx, ty, tz]``, rotation vector first.

        Translation is taken as-is, not through the SE(3) left Jacobian;
        this is the parameterization used by the aligner.
        """
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def log(self) -> np.ndarray:
        return np.concatenate([so3_log(self.quat), self.translation])

    def compose(self, other: Pose) -> Pose:
        q = quat_multiply(self.quat, other.quat)
        t = self.rotation @ other.translation + self.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        q_inv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        R_inv = quat_to_matrix(q_inv)
        return Pose(q_inv, -R_inv @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(np.linalg.norm(so3_log(self.quat)))

    def yaw(self) -> float:
        R = self.rotation
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def is_close(self, other: Pose, trans_tol=1e-9, rot_tol=1e-9) -> bool:
        d = self.inverse() @ other
        return bool(np.linalg.norm(d.translation) <= trans_tol and d.angle() <= rot_tol)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(quat=[{q}], translation=[{t}])"


def transform(pose: Pose, p) -> np.ndarray:
    return pose.apply(p)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def relative_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) of ``truth^-1 * estimate``."""
    d = truth.inverse() @ estimate
    return float(np.linalg.norm(d.translation)), d.angle()
