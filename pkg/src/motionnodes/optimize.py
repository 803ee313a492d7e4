"""Gradient-based refinement of node keyframes.

The objective is the weighted sum of a pixel-space tracking term, a
camera-depth term and the pairwise ARAP energy between consecutive keyframe
times. Photometric and mask terms are out of scope; their weights exist so
configurations stay compatible but must be zero.

Keyframe positions get analytic gradients (everything is linear in them up
to the projection). Keyframe rotations are refined by central finite
differences in a rotation-vector chart around the current quaternion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .deform_graph import BindingTable, NodeSet, arap_energy
from .errors import BehindCamera, NonFiniteLoss, SpanMismatch
from .rigid_math import quat_from_rotvec, quat_mul, quat_normalize
from .spline_traj import position_weights

log = logging.getLogger(__name__)

MAX_HALVINGS = 20
ROTATION_FD_STEP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 0.0
    mask: float = 0.0
    depth: float = 0.1
    track: float = 1.0
    arap: float = 0.1

    def __post_init__(self):
        if self.rgb != 0.0 or self.mask != 0.0:
            raise ValueError("photometric and mask terms are not available; their weights must be 0")
        if min(self.depth, self.track, self.arap) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class OptimData:
    """Observations flattened to one row per visible anchored tracklet sample."""

    frame_times: np.ndarray  # (F,)
    cam_rotation: np.ndarray  # (F, 3, 3)
    cam_translation: np.ndarray  # (F, 3)
    cam_focal: np.ndarray  # (F, 2)
    cam_principal: np.ndarray  # (F, 2)
    obs_frame: np.ndarray  # (n,)
    obs_node: np.ndarray  # (n,)
    obs_pixel: np.ndarray  # (n, 2)
    obs_depth: np.ndarray  # (n,)
    edges: np.ndarray  # (E, 2)

    @classmethod
    def build(cls, frame_times, cameras, pixels, depths, visible, anchor_map, edges) -> "OptimData":
        frame_times = np.asarray(frame_times, dtype=float)
        if len(cameras) != frame_times.size:
            raise SpanMismatch("one camera per frame required")
        anchor_map = np.asarray(anchor_map, dtype=int)
        visible = np.asarray(visible, dtype=bool)
        mask = visible & (anchor_map[:, None] >= 0)
        t_idx, f_idx = np.nonzero(mask)
        return cls(
            frame_times=frame_times,
            cam_rotation=np.stack([c.rotation for c in cameras]),
            cam_translation=np.stack([c.translation for c in cameras]),
            cam_focal=np.array([[c.fx, c.fy] for c in cameras], dtype=float),
            cam_principal=np.array([[c.cx, c.cy] for c in cameras], dtype=float),
            obs_frame=f_idx,
            obs_node=anchor_map[t_idx],
            obs_pixel=np.asarray(pixels, dtype=float)[t_idx, f_idx],
            obs_depth=np.asarray(depths, dtype=float)[t_idx, f_idx],
            edges=np.asarray(edges, dtype=int).reshape(-1, 2),
        )


@dataclass
class OptimState:
    nodes: NodeSet
    binding: Optional[BindingTable] = None
    primitives: Optional[np.ndarray] = None
    iteration: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    def copy(self) -> "OptimState":
        return OptimState(self.nodes.copy(), self.binding, self.primitives, self.iteration, list(self.history))


def _check(state: OptimState, data: OptimData):
    lo, hi = state.nodes.span
    if data.frame_times[0] < lo - 1e-12 or data.frame_times[-1] > hi + 1e-12:
        raise SpanMismatch("frame times fall outside the node keyframe span")
    if data.obs_node.size and data.obs_node.max() >= len(state.nodes):
        raise SpanMismatch("anchor map refers to a node that does not exist")


def _observed_points(state: OptimState, data: OptimData):
    w = position_weights(state.nodes.keyframe_times, data.frame_times)[data.obs_frame]
    x = np.einsum("ok,okd->od", w, state.nodes.positions[data.obs_node])
    xc = np.einsum("oij,oj->oi", data.cam_rotation[data.obs_frame], x) + data.cam_translation[data.obs_frame]
    return w, xc


def _scatter(state: OptimState, data: OptimData, w, g_world) -> np.ndarray:
    grad = np.zeros_like(state.nodes.positions)
    np.add.at(grad, data.obs_node, w[:, :, None] * g_world[:, None, :])
    return grad


def track_loss(state: OptimState, data: OptimData):
    """Squared pixel error of projected anchor-node positions (pixels^2)."""
    _check(state, data)
    if data.obs_node.size == 0:
        return 0.0, np.zeros_like(state.nodes.positions)
    w, xc = _observed_points(state, data)
    z = xc[:, 2]
    if np.any(z <= 1e-9):
        raise BehindCamera("a tracked node moved behind its camera")
    f = data.cam_focal[data.obs_frame]
    c = data.cam_principal[data.obs_frame]
    uv = f * xc[:, :2] / z[:, None] + c
    r = uv - data.obs_pixel
    loss = float(np.sum(r * r))
    # d uv / d x_c, then through the world-to-camera rotation
    g_c = np.empty_like(xc)
    g_c[:, 0] = 2.0 * r[:, 0] * f[:, 0] / z
    g_c[:, 1] = 2.0 * r[:, 1] * f[:, 1] / z
    g_c[:, 2] = -2.0 * (r[:, 0] * f[:, 0] * xc[:, 0] + r[:, 1] * f[:, 1] * xc[:, 1]) / (z * z)
    g_world = np.einsum("oij,oi->oj", data.cam_rotation[data.obs_frame], g_c)
    return loss, _scatter(state, data, w, g_world)


def depth_loss(state: OptimState, data: OptimData):
    """Squared camera-depth error of anchor-node positions (meters^2)."""
    _check(state, data)
    if data.obs_node.size == 0:
        return 0.0, np.zeros_like(state.nodes.positions)
    w, xc = _observed_points(state, data)
    r = xc[:, 2] - data.obs_depth
    g_world = 2.0 * r[:, None] * data.cam_rotation[data.obs_frame][:, 2, :]
    return float(np.sum(r * r)), _scatter(state, data, w, g_world)


def arap_loss(state: OptimState, data: OptimData):
    """ARAP energy summed over consecutive keyframe-time pairs."""
    times = state.nodes.keyframe_times
    total = 0.0
    grad = np.zeros_like(state.nodes.positions)
    for t_a, t_b in zip(times[:-1], times[1:]):
        e, g = arap_energy(state.nodes, data.edges, t_a, t_b)
        total += e
        grad += g
    return total, grad


def loss_terms(state: OptimState, data: OptimData, weights: LossWeights):
    """Weighted total, its position gradient and the unweighted terms."""
    grad = np.zeros_like(state.nodes.positions)
    terms = {"rgb": 0.0, "mask": 0.0, "track": 0.0, "depth": 0.0, "arap": 0.0}
    total = 0.0
    for name, fn, lam in (
        ("track", track_loss, weights.track),
        ("depth", depth_loss, weights.depth),
        ("arap", arap_loss, weights.arap),
    ):
        if lam == 0.0:
            continue
        value, g = fn(state, data)
        terms[name] = value
        total += lam * value
        grad += lam * g
    return total, grad, terms


def total_loss(state: OptimState, data: OptimData, weights: LossWeights):
    total, grad, _ = loss_terms(state, data, weights)
    return total, grad


def _safe_total(state, data, weights) -> float:
    try:
        value, _, _ = loss_terms(state, data, weights)
    except BehindCamera:
        return math.inf
    return value if math.isfinite(value) else math.inf


def _with_positions(state: OptimState, positions) -> OptimState:
    nodes = state.nodes.copy()
    nodes.positions = positions
    return OptimState(nodes, state.binding, state.primitives, state.iteration, state.history)


def _with_rotations(state: OptimState, rotations) -> OptimState:
    nodes = state.nodes.copy()
    nodes.rotations = rotations
    return OptimState(nodes, state.binding, state.primitives, state.iteration, state.history)


def _rotate(rotations, rotvecs):
    return quat_normalize(quat_mul(quat_from_rotvec(rotvecs), rotations))


def rotation_gradient(state: OptimState, data: OptimData, weights: LossWeights) -> np.ndarray:
    """Central-difference gradient w.r.t. a rotation-vector chart per keyframe.

    Shape ``(N, K, 3)``; entry ``[i, k]`` perturbs node ``i``'s keyframe ``k``
    rotation by ``exp(delta) * q``.
    """
    rot = state.nodes.rotations
    grad = np.zeros(rot.shape[:-1] + (3,))
    h = ROTATION_FD_STEP
    # One joint probe first: if no term reads the rotations, every entry is 0.
    probe = np.random.default_rng(0).normal(scale=1e-3, size=grad.shape)
    if _safe_total(_with_rotations(state, _rotate(rot, probe)), data, weights) == _safe_total(state, data, weights):
        return grad
    for i in range(rot.shape[0]):
        for k in range(rot.shape[1]):
            for a in range(3):
                delta = np.zeros(3)
                delta[a] = h
                plus = rot.copy()
                minus = rot.copy()
                plus[i, k] = _rotate(rot[i, k], delta)
                minus[i, k] = _rotate(rot[i, k], -delta)
                f_plus = _safe_total(_with_rotations(state, plus), data, weights)
                f_minus = _safe_total(_with_rotations(state, minus), data, weights)
                if math.isfinite(f_plus) and math.isfinite(f_minus):
                    grad[i, k, a] = (f_plus - f_minus) / (2.0 * h)
    return grad


def _line_search(f0: float, step: float, trial: Callable[[float], float]):
    """Halve ``step`` until ``trial(step) <= f0``; ``(step, value)`` or ``(0, f0)``."""
    for _ in range(MAX_HALVINGS + 1):
        value = trial(step)
        if value <= f0:
            return step, value
        step *= 0.5
    return 0.0, f0


def refine(
    state: OptimState,
    data: OptimData,
    weights: LossWeights,
    iterations: int,
    step_size: float,
    rotation_interval: int = 10,
    callback: Optional[Callable[[Dict[str, float]], None]] = None,
) -> OptimState:
    """Gradient descent with backtracking on keyframe positions.

    Each iteration starts its line search from a Barzilai-Borwein step (the
    first from ``step_size``) and halves it up to 20 times until the loss
    does not increase, so the returned loss never exceeds the input loss.
    Every ``rotation_interval`` iterations (0 disables) keyframe rotations
    take one finite-difference descent step with the same line search.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    state = state.copy()
    f, grad, terms = loss_terms(state, data, weights)
    if not math.isfinite(f):
        raise NonFiniteLoss("initial loss is not finite", state)
    step = step_size
    rot_step = step_size
    prev_x = prev_g = None
    for it in range(iterations):
        x = state.nodes.positions
        if prev_x is not None:
            s = (x - prev_x).ravel()
            y = (grad - prev_g).ravel()
            sy = float(s @ y)
            step = float(s @ s) / sy if sy > 0 else 2.0 * step
        prev_x, prev_g = x, grad
        taken, f_new = _line_search(
            f, step, lambda a: _safe_total(_with_positions(state, x - a * grad), data, weights)
        )
        if taken > 0.0:
            state = _with_positions(state, x - taken * grad)
            step = taken
        if rotation_interval and (it + 1) % rotation_interval == 0:
            rg = rotation_gradient(state, data, weights)
            if np.any(rg != 0.0):
                rot = state.nodes.rotations
                taken_r, f_rot = _line_search(
                    f_new, rot_step, lambda a: _safe_total(_with_rotations(state, _rotate(rot, -a * rg)), data, weights)
                )
                if taken_r > 0.0:
                    state = _with_rotations(state, _rotate(rot, -taken_r * rg))
                    rot_step = taken_r
                    f_new = f_rot
        f, grad, terms = loss_terms(state, data, weights)
        if not math.isfinite(f):
            raise NonFiniteLoss(f"loss became non-finite at iteration {it}", state)
        state.iteration += 1
        entry = {"iteration": state.iteration, **terms, "total": f, "step": taken}
        state.history.append(entry)
        if callback is not None:
            callback(entry)
    return state
