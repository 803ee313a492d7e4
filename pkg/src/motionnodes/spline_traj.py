"""Cubic Hermite node trajectories.

Positions are keyframed in normalized time ``[0, 1]``. Tangents are the
Catmull-Rom finite differences of the keyframe positions, so a trajectory is
a fixed linear map of its positions: ``xi(t) = W(t) @ P`` with ``W`` from
:func:`position_weights`. That linearity is what keeps :func:`fit_spline` a
closed-form least-squares problem and gives the loss gradients their simple
chain rule.

Rotations are keyframed unit quaternions interpolated with slerp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import OutOfRange, RankDeficient
from .rigid_math import IDENTITY_QUAT, slerp

MIN_KEYFRAME_GAP = 1e-6
SPAN_TOL = 1e-12
DEFAULT_RIDGE = 1e-8
MEAN_PULL = 1.0


def validate_keyframe_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("a trajectory needs at least two keyframes")
    if np.any(np.diff(times) < MIN_KEYFRAME_GAP):
        raise ValueError("keyframe times must increase by at least 1e-6")
    return times


def uniform_keyframes(count: int, start: float = 0.0, stop: float = 1.0) -> np.ndarray:
    return np.linspace(start, stop, int(count))


def hermite_basis(tau):
    """Return ``(h00, h10, h01, h11)`` at ``tau`` (scalar or array)."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < -SPAN_TOL) or np.any(tau > 1.0 + SPAN_TOL):
        raise OutOfRange(f"hermite parameter outside [0, 1]: {tau}")
    tau = np.clip(tau, 0.0, 1.0)
    t2 = tau * tau
    t3 = t2 * tau
    h00 = 2.0 * t3 - 3.0 * t2 + 1.0
    h10 = t3 - 2.0 * t2 + tau
    h01 = -2.0 * t3 + 3.0 * t2
    h11 = t3 - t2
    if h00.ndim == 0:
        return float(h00), float(h10), float(h01), float(h11)
    return h00, h10, h01, h11


def locate(times, t) -> Tuple[np.ndarray, np.ndarray]:
    """Segment index ``k`` and local parameter ``tau`` for each query time."""
    times = np.asarray(times, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < times[0] - SPAN_TOL) or np.any(t > times[-1] + SPAN_TOL):
        raise OutOfRange(
            f"query time outside keyframe span [{times[0]}, {times[-1]}]"
        )
    t = np.clip(t, times[0], times[-1])
    k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2)
    tau = (t - times[k]) / (times[k + 1] - times[k])
    return k, tau


def catmull_rom_matrix(times) -> np.ndarray:
    """``(K, K)`` matrix ``D`` with tangents ``dP = D @ P``."""
    times = np.asarray(times, dtype=float)
    n = times.size
    d = np.zeros((n, n))
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[0] /= times[1] - times[0]
    d[-1, -2], d[-1, -1] = -1.0, 1.0
    d[-1] /= times[-1] - times[-2]
    for k in range(1, n - 1):
        span = times[k + 1] - times[k - 1]
        d[k, k - 1] = -1.0 / span
        d[k, k + 1] = 1.0 / span
    return d


def catmull_rom_tangents(times, positions) -> np.ndarray:
    times = validate_keyframe_times(times)
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] != times.size:
        raise ValueError("one position per keyframe required")
    return catmull_rom_matrix(times) @ positions


def position_weights(times, t) -> np.ndarray:
    """``(n, K)`` weights mapping keyframe positions to ``xi(t)``.

    Row ``i`` holds ``d xi(t_i) / d P_k`` for every keyframe ``k``.
    """
    times = np.asarray(times, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k, tau = locate(times, t)
    h00, h10, h01, h11 = hermite_basis(tau)
    d = catmull_rom_matrix(times)
    dt = times[k + 1] - times[k]
    w = (h10 * dt)[:, None] * d[k] + (h11 * dt)[:, None] * d[k + 1]
    rows = np.arange(t.size)
    w[rows, k] += h00
    w[rows, k + 1] += h01
    return w


@dataclass(frozen=True)
class SplineTrajectory:
    keyframe_times: np.ndarray
    positions: np.ndarray  # (K, 3) meters
    tangents: np.ndarray  # (K, 3) meters per unit time
    rotations: np.ndarray  # (K, 4) unit quaternions

    def __post_init__(self):
        times = validate_keyframe_times(self.keyframe_times)
        positions = np.asarray(self.positions, dtype=float)
        tangents = np.asarray(self.tangents, dtype=float)
        rotations = np.asarray(self.rotations, dtype=float)
        n = times.size
        if positions.shape != (n, 3) or tangents.shape != (n, 3) or rotations.shape != (n, 4):
            raise ValueError("positions, tangents and rotations need one row per keyframe")
        object.__setattr__(self, "keyframe_times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "tangents", tangents)
        object.__setattr__(self, "rotations", rotations)

    @classmethod
    def from_positions(cls, times, positions, rotations=None) -> "SplineTrajectory":
        """Build a trajectory whose tangents are Catmull-Rom differences."""
        times = validate_keyframe_times(times)
        positions = np.asarray(positions, dtype=float)
        if rotations is None:
            rotations = np.tile(IDENTITY_QUAT, (times.size, 1))
        return cls(times, positions, catmull_rom_tangents(times, positions), rotations)

    @classmethod
    def static(cls, times, position) -> "SplineTrajectory":
        times = validate_keyframe_times(times)
        return cls.from_positions(times, np.tile(np.asarray(position, dtype=float), (times.size, 1)))

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.keyframe_times[0]), float(self.keyframe_times[-1])


def eval_position(traj: SplineTrajectory, t):
    """Position at time(s) ``t``; ``(3,)`` for a scalar, ``(n, 3)`` otherwise."""
    scalar = np.ndim(t) == 0
    times = traj.keyframe_times
    k, tau = locate(times, np.atleast_1d(t))
    h00, h10, h01, h11 = hermite_basis(tau)
    dt = (times[k + 1] - times[k])[:, None]
    p = traj.positions
    m = traj.tangents
    out = (
        h00[:, None] * p[k]
        + h10[:, None] * dt * m[k]
        + h01[:, None] * p[k + 1]
        + h11[:, None] * dt * m[k + 1]
    )
    return out[0] if scalar else out


def eval_rotation(traj: SplineTrajectory, t):
    scalar = np.ndim(t) == 0
    k, tau = locate(traj.keyframe_times, np.atleast_1d(t))
    q = slerp(traj.rotations[k], traj.rotations[k + 1], tau)
    return q[0] if scalar else q


def fit_spline(
    sample_times,
    sample_points,
    keyframe_times,
    ridge: float = DEFAULT_RIDGE,
    rotations=None,
) -> Tuple[SplineTrajectory, float]:
    """Least-squares fit of keyframe positions to timed 3D samples.

    Returns the fitted trajectory and the objective value
    ``sum ||x_t - xi(t)||^2`` at the solution.

    A full-rank design is solved exactly. When some keyframe is not pinned
    down by the samples, a term of weight ``ridge`` penalizing second
    differences of consecutive keyframe positions selects a solution, so
    unobserved keyframes continue the observed motion linearly. A pull of
    the same weight towards the sample mean is added only if that is still
    singular, e.g. for a single sample.
    That extra term is not counted in the returned residual.
    """
    keyframe_times = validate_keyframe_times(keyframe_times)
    ts = np.asarray(sample_times, dtype=float).reshape(-1)
    xs = np.asarray(sample_points, dtype=float).reshape(-1, 3)
    if ts.size == 0:
        raise RankDeficient("no samples to fit")
    if ts.size != xs.shape[0]:
        raise ValueError("one sample time per sample point required")
    w = position_weights(keyframe_times, ts)
    n_key = keyframe_times.size
    sol, _, rank, _ = np.linalg.lstsq(w, xs, rcond=None)
    if rank < n_key:
        d2 = np.diff(np.eye(n_key), n=2, axis=0)
        normal = w.T @ w + ridge * (d2.T @ d2)
        rhs = w.T @ xs
        if np.linalg.cond(normal) > 1.0 / np.finfo(float).eps:
            normal = normal + ridge * MEAN_PULL * np.eye(n_key)
            rhs = rhs + ridge * MEAN_PULL * xs.mean(axis=0)
        if np.linalg.cond(normal) > 1.0 / np.finfo(float).eps:
            raise RankDeficient(
                f"normal equations singular even with ridge {ridge:g} "
                f"({ts.size} samples for {n_key} keyframes)"
            )
        sol = np.linalg.solve(normal, rhs)
    residual = float(np.sum((xs - w @ sol) ** 2))
    traj = SplineTrajectory.from_positions(keyframe_times, sol, rotations)
    return traj, residual
