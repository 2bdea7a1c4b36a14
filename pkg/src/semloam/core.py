"""Geometric primitives: quaternions, rigid transforms and surface projectors.

Conventions: Hamilton quaternions stored as ``(w, x, y, z)``, active rotation,
a point is mapped as ``q * p * q^-1 + t``. Distances are meters, angles radians.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

_EYE3 = np.eye(3)


class SurfaceKind(enum.IntEnum):
    PLANE = 0
    LINE = 1


class SurfaceType(enum.IntEnum):
    """Keypoint surface type; RAW only tags unfiltered map points."""

    EDGE = 0
    PLANAR = 1
    RAW = 2


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_multiply(a, b):
    """Hamilton product ``a * b``; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, p):
    """Rotate ``p`` by the literal sandwich product ``q p q^-1``."""
    p = np.asarray(p, dtype=float)
    pure = np.concatenate([np.zeros(p.shape[:-1] + (1,)), p], axis=-1)
    return quat_multiply(quat_multiply(q, pure), quat_conjugate(q))[..., 1:]


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; returns the quaternion with non-negative w."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
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
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_rotvec(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-8:
        # second-order series keeps the small-angle case accurate
        half = 0.5 * rotvec
        q = np.concatenate([[1.0 - 0.5 * half @ half], half])
        return q / np.linalg.norm(q)
    axis = rotvec / angle
    return np.concatenate([[np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis])


def quat_to_rotvec(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vec_norm = np.linalg.norm(q[1:])
    if vec_norm < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vec_norm, q[0])
    return angle * q[1:] / vec_norm


def skew(v):
    """Cross-product matrix; broadcasts over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# rigid transforms


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform ``T = (t, q)`` mapping points from frame A to frame B."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        q = np.asarray(self.q, dtype=float).reshape(4)
        if not (np.isfinite(t).all() and np.isfinite(q).all()):
            raise ValueError("rigid transform must be finite")
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "q", _frozen(q / norm))
        object.__setattr__(self, "_R", _frozen(quat_to_matrix(self.q)))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, 3], matrix_to_quat(M[:3, :3]))

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(np.asarray(t, dtype=float), quat_from_rotvec(rotvec))

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self.t
        return M

    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.q)

    def rotation_angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def apply(self, points) -> np.ndarray:
        """Apply to a single point ``(3,)`` or an array of points ``(N, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self._R.T + self.t

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self._R @ other.t + self.t, quat_multiply(self.q, other.q))

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        return RigidTransform(-(self._R.T @ self.t), quat_conjugate(self.q))

    def delta(self, other: RigidTransform) -> tuple[float, float]:
        """Translation (m) and rotation (rad) magnitudes of ``self^-1 ∘ other``."""
        d = self.inverse() @ other
        return float(np.linalg.norm(d.t)), d.rotation_angle()

    def __repr__(self):
        t = np.array2string(self.t, precision=6)
        q = np.array2string(self.q, precision=6)
        return f"RigidTransform(t={t}, q={q})"


def apply_transform(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def compose(T_a: RigidTransform, T_b: RigidTransform) -> RigidTransform:
    return T_a.compose(T_b)


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


# ---------------------------------------------------------------------------
# surface models


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """A fitted plane (``direction`` = normal) or line (``direction`` = director)."""

    kind: SurfaceKind
    anchor: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        object.__setattr__(self, "kind", SurfaceKind(self.kind))
        object.__setattr__(self, "anchor", _frozen(np.asarray(self.anchor, dtype=float).reshape(3)))
        object.__setattr__(self, "direction", _frozen(d / np.linalg.norm(d)))

    def projector(self) -> np.ndarray:
        return projectors(np.array([self.kind == SurfaceKind.PLANE]), self.direction[None])[0]

    def distance(self, p) -> float:
        return float(np.linalg.norm(project_along_normal(self, np.asarray(p) - self.anchor)))


def projectors(is_plane, directions) -> np.ndarray:
    """Stack of ``(N, 3, 3)`` normal-direction projectors.

    Planes give ``n n^T``; lines give ``I - v v^T``. Both keep the part of a
    vector that is orthogonal to the surface.
    """
    d = np.asarray(directions, dtype=float)
    outer = d[:, :, None] * d[:, None, :]
    is_plane = np.asarray(is_plane, dtype=bool)
    return np.where(is_plane[:, None, None], outer, _EYE3 - outer)


def project_along_normal(model: SurfaceModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    d = model.direction
    along = (u @ d)[..., None] * d
    if model.kind == SurfaceKind.PLANE:
        return along
    return u - along
