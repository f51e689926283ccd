"""Rigid transforms in SE(3) stored as a unit quaternion plus a translation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    # leave already-unit input bit-identical so serialization round trips
    if abs(n - 1.0) > 2e-16:
        q = q / n
    # canonical hemisphere so that equal rotations compare equal componentwise
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
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


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rigid motion ``p -> R p + t``.

    ``q`` is a unit quaternion in (w, x, y, z) order with ``w >= 0``;
    ``t`` is a translation in meters. Instances are immutable.
    """

    q: np.ndarray
    t: np.ndarray

    def __init__(self, q: Sequence[float] = (1.0, 0.0, 0.0, 0.0), t: Sequence[float] = (0.0, 0.0, 0.0)):
        q_arr = np.asarray(q, dtype=np.float64).reshape(4)
        t_arr = np.asarray(t, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t_arr)):
            raise ValueError("translation must be finite")
        q_arr = _normalize_quat(q_arr)
        q_arr.setflags(write=False)
        t_arr.setflags(write=False)
        object.__setattr__(self, "q", q_arr)
        object.__setattr__(self, "t", t_arr)

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, x: float | Sequence[float], y: float = 0.0, z: float = 0.0) -> "RigidTransform":
        if np.ndim(x) == 1:
            return cls(t=x)
        return cls(t=(x, y, z))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], t: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        xyzw = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat()
        return cls(q=np.roll(xyzw, 1), t=t)

    @classmethod
    def from_axis_angle(
        cls, axis: Sequence[float], angle: float, t: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls(q=np.concatenate([[np.cos(half)], np.sin(half) * axis]), t=t)

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        rotation = np.asarray(rotation, dtype=np.float64)
        if rotation.shape == (4, 4):
            t = rotation[:3, 3]
            rotation = rotation[:3, :3]
        if np.linalg.det(rotation) <= 0.0:
            raise ValueError("rotation matrix must have determinant +1")
        xyzw = Rotation.from_matrix(rotation).as_quat()
        return cls(q=np.roll(xyzw, 1), t=t)

    @classmethod
    def from_list(cls, values: Iterable[float]) -> "RigidTransform":
        """Inverse of :meth:`to_list`: ``[tx, ty, tz, qw, qx, qy, qz]``."""
        v = [float(x) for x in values]
        if len(v) != 7:
            raise ValueError(f"expected 7 pose values, got {len(v)}")
        return cls(q=v[3:], t=v[:3])

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 1.0, max_angle: float = np.pi) -> "RigidTransform":
        axis = rng.normal(size=3)
        angle = rng.uniform(0.0, max_angle)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        return cls.from_axis_angle(axis, angle, t=direction * rng.uniform(0.0, max_translation))

    # -- group operations ---------------------------------------------------

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: applies ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        return RigidTransform(q=q, t=self.t + self.rotation @ other.t)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        q_inv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(q=q_inv, t=-(quat_to_matrix(q_inv) @ self.t))

    # -- application --------------------------------------------------------

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (n, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        return vectors @ self.rotation.T

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def as_rotvec(self) -> np.ndarray:
        return Rotation.from_quat(np.roll(self.q, -1)).as_rotvec()

    def to_list(self) -> list[float]:
        return [float(x) for x in self.t] + [float(x) for x in self.q]

    @property
    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * float(np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.q, other.q, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self) -> str:
        t = ", ".join(f"{x:.6g}" for x in self.t)
        q = ", ".join(f"{x:.6g}" for x in self.q)
        return f"RigidTransform(t=[{t}], q=[{q}])"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def pose_error(estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """Translation error (m) and rotation error (degrees) between two poses."""
    diff = truth.inverse() @ estimate
    return float(np.linalg.norm(estimate.t - truth.t)), float(np.degrees(diff.angle))
