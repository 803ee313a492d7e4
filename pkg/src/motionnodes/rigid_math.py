"""Quaternion, dual-quaternion and SE(3) algebra.

Conventions:
    - Hamilton product, storage order ``[w, x, y, z]``.
    - ``quat_to_matrix(q) @ v`` rotates ``v`` by ``q`` (active rotation).
    - A pose ``(q, t)`` maps ``x -> R(q) x + t``.
    - Canonical sign (``w >= 0``) is applied only when serializing, never
      inside blending.

All quaternion helpers broadcast over leading axes, so ``(..., 4)`` arrays
work everywhere a single quaternion does.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from .errors import DegenerateBlend, NonUnitInput

UNIT_TOL = 1e-9
NON_UNIT_TOL = 1e-6
DEGENERATE_TOL = 1e-12

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= DEGENERATE_TOL):
        raise DegenerateBlend("cannot normalize a zero quaternion")
    return q / n


def quat_canonical(q):
    """Pick the representative with ``w >= 0`` (for serialization only)."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion (Shepperd's method, single matrix)."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = axis / np.where(n > 0.0, n, 1.0)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_rotvec(v):
    """Exponential map from a rotation vector (axis * angle)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    half = 0.5 * angle
    # sin(x/2)/x with its Taylor series near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * v], axis=-1)


def quat_angle(a, b):
    """Rotation angle (radians) between the rotations represented by a and b."""
    d = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    cross = quat_mul(quat_conj(a), b)[..., 1:]
    # atan2 form stays accurate for tiny angles where arccos(d) does not
    return 2.0 * np.arctan2(np.linalg.norm(cross, axis=-1), d)


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=float))


def slerp(a, b, u):
    """Shortest-arc spherical interpolation, ``u`` in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.sum(a * b, axis=-1)
    b = np.where((d < 0.0)[..., None], -b, b)
    d = np.abs(d)
    theta = np.arccos(np.clip(d, -1.0, 1.0))
    sin_t = np.sin(theta)
    near = sin_t < 1e-10
    safe = np.where(near, 1.0, sin_t)
    wa = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / safe)
    wb = np.where(near, u, np.sin(u * theta) / safe)
    out = wa[..., None] * a + wb[..., None] * b
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray  # unit quaternion [w, x, y, z]
    translation: np.ndarray  # meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(IDENTITY_QUAT.copy(), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation_matrix, translation) -> "SE3Pose":
        return cls(matrix_to_quat(rotation_matrix), translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T + self.translation

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """``self * other``: apply ``other`` first."""
        return SE3Pose(
            quat_mul(self.rotation, other.rotation),
            self.matrix @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float))

    def __neg__(self) -> "DualQuaternion":
        return DualQuaternion(-self.real, -self.dual)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])


def _dual_from_translation(real, translation):
    translation = np.asarray(translation, dtype=float)
    p = np.concatenate([np.zeros(translation.shape[:-1] + (1,)), translation], axis=-1)
    return 0.5 * quat_mul(p, real)


def _translation_from_dual(real, dual):
    return 2.0 * quat_mul(dual, quat_conj(real))[..., 1:]


def se3_to_dq(pose: SE3Pose) -> DualQuaternion:
    real = np.array(pose.rotation, dtype=float)
    return DualQuaternion(real, _dual_from_translation(real, pose.translation))


def dq_to_se3(dq: DualQuaternion) -> SE3Pose:
    n = np.linalg.norm(dq.real)
    if abs(n - 1.0) > NON_UNIT_TOL:
        raise NonUnitInput(f"dual quaternion real part has norm {n:.3g}; normalize first")
    return SE3Pose(dq.real.copy(), _translation_from_dual(dq.real, dq.dual))


def _normalize_arrays(real, dual):
    n = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(n <= DEGENERATE_TOL):
        raise DegenerateBlend("blended dual quaternion has a vanishing real part")
    real = real / n
    dual = dual / n
    # project out the component along real to restore dot(real, dual) = 0
    dual = dual - np.sum(real * dual, axis=-1, keepdims=True) * real
    return real, dual


def dq_normalize(dq: DualQuaternion) -> DualQuaternion:
    real, dual = _normalize_arrays(dq.real, dq.dual)
    return DualQuaternion(real, dual)


def dqb_blend(entries: Iterable[Tuple[float, DualQuaternion]]) -> SE3Pose:
    """Dual-quaternion blend of weighted rigid transforms.

    Each dual quaternion is flipped onto the hemisphere of the first entry's
    real part before the weighted sum, so ``q`` and ``-q`` blend identically.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("dqb_blend needs at least one entry")
    weights = np.array([w for w, _ in entries], dtype=float)
    if abs(weights.sum() - 1.0) > UNIT_TOL or np.any(weights < 0.0):
        raise ValueError("blend weights must be nonnegative and sum to one")
    real = np.stack([dq.real for _, dq in entries])
    dual = np.stack([dq.dual for _, dq in entries])
    rot, trans = dqb_blend_arrays(weights[None], real[None], dual[None])
    return SE3Pose(rot[0], trans[0])


def dqb_blend_arrays(weights, real, dual):
    """Batched blend.

    Args:
        weights: ``(N, K)`` blend weights, rows summing to one.
        real, dual: ``(N, K, 4)`` dual-quaternion parts.

    Returns:
        ``(rotation (N, 4), translation (N, 3))`` of the blended poses.
    """
    weights = np.asarray(weights, dtype=float)
    real = np.asarray(real, dtype=float)
    dual = np.asarray(dual, dtype=float)
    sign = np.where(np.sum(real * real[:, :1], axis=-1) < 0.0, -1.0, 1.0)
    w = (weights * sign)[..., None]
    real_sum = np.sum(w * real, axis=1)
    dual_sum = np.sum(w * dual, axis=1)
    real_n, dual_n = _normalize_arrays(real_sum, dual_sum)
    return real_n, _translation_from_dual(real_n, dual_n)


def poses_to_dq_arrays(rotations, translations):
    """Vectorized ``se3_to_dq`` on ``(..., 4)`` / ``(..., 3)`` arrays."""
    rotations = np.asarray(rotations, dtype=float)
    return rotations, _dual_from_translation(rotations, translations)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit quaternions, shape ``(n, 4)``."""
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)

