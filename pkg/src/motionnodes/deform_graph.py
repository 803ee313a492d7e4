"""Sparse control nodes and their influence on Gaussian primitives.

A node owns a canonical center, an RBF radius and a spline trajectory. Each
primitive is bound once, in canonical space, to its K nearest nodes with
normalized Gaussian-kernel weights; at query time the neighbors' rigid
transforms are blended as dual quaternions and applied to the primitive.

Node rotations act about the node's own canonical center, so a node whose
rotation keyframes are all identity simply translates its center along the
spline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import InsufficientNodes
from .rigid_math import (
    IDENTITY_QUAT,
    SE3Pose,
    dqb_blend_arrays,
    poses_to_dq_arrays,
    quat_to_matrix,
    slerp,
)
from .spline_traj import (
    SplineTrajectory,
    eval_position,
    eval_rotation,
    locate,
    position_weights,
    validate_keyframe_times,
)

log = logging.getLogger(__name__)

DEFAULT_K = 4
RADIUS_NEIGHBOR_RANK = 3
_KNN_CHUNK = 4096


@dataclass(frozen=True)
class Node:
    center: np.ndarray
    radius: float
    trajectory: SplineTrajectory

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0.0:
            raise ValueError("node radius must be positive")


@dataclass(frozen=True)
class Primitive:
    center: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float))
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 1e-12:
            raise ValueError("covariance must be positive definite")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie strictly inside (0, 1)")


@dataclass
class NodeSet:
    """Structure-of-arrays view of ``N`` nodes sharing keyframe times.

    ``anchors[i]`` is the index of the tracklet node ``i`` was initialized
    from, or -1.
    """

    centers: np.ndarray  # (N, 3)
    radii: np.ndarray  # (N,)
    keyframe_times: np.ndarray  # (K,)
    positions: np.ndarray  # (N, K, 3)
    rotations: np.ndarray  # (N, K, 4)
    anchors: np.ndarray = field(default=None)
    merged_counts: np.ndarray = field(default=None)
    priors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        n = self.centers.shape[0]
        self.radii = np.asarray(self.radii, dtype=float).reshape(n)
        self.keyframe_times = validate_keyframe_times(self.keyframe_times)
        k = self.keyframe_times.size
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, k, 3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, k, 4)
        if np.any(self.radii <= 0.0):
            raise ValueError("node radii must be positive")
        self.anchors = (
            np.full(n, -1, dtype=int) if self.anchors is None else np.asarray(self.anchors, dtype=int)
        )
        self.merged_counts = (
            np.ones(n, dtype=int) if self.merged_counts is None else np.asarray(self.merged_counts, dtype=int)
        )
        self.priors = np.zeros(n) if self.priors is None else np.asarray(self.priors, dtype=float)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def static(cls, centers, keyframe_times, radii=None, **extra) -> "NodeSet":
        centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        times = validate_keyframe_times(keyframe_times)
        if radii is None:
            radii = initial_radii(centers)
        positions = np.repeat(centers[:, None, :], times.size, axis=1)
        rotations = np.tile(IDENTITY_QUAT, (centers.shape[0], times.size, 1))
        return cls(centers, radii, times, positions, rotations, **extra)

    @classmethod
    def from_nodes(cls, nodes: Sequence[Node]) -> "NodeSet":
        if not nodes:
            raise InsufficientNodes("empty node list")
        times = nodes[0].trajectory.keyframe_times
        for node in nodes:
            if not np.array_equal(node.trajectory.keyframe_times, times):
                raise ValueError("all nodes must share keyframe times")
        return cls(
            np.stack([n.center for n in nodes]),
            np.array([n.radius for n in nodes]),
            times,
            np.stack([n.trajectory.positions for n in nodes]),
            np.stack([n.trajectory.rotations for n in nodes]),
        )

    def node(self, i: int) -> Node:
        traj = SplineTrajectory.from_positions(
            self.keyframe_times, self.positions[i], self.rotations[i]
        )
        return Node(self.centers[i], float(self.radii[i]), traj)

    def nodes(self) -> List[Node]:
        return [self.node(i) for i in range(len(self))]

    def copy(self) -> "NodeSet":
        return NodeSet(
            self.centers.copy(),
            self.radii.copy(),
            self.keyframe_times.copy(),
            self.positions.copy(),
            self.rotations.copy(),
            self.anchors.copy(),
            self.merged_counts.copy(),
            self.priors.copy(),
        )

    @property
    def span(self):
        return float(self.keyframe_times[0]), float(self.keyframe_times[-1])

    def positions_at(self, t) -> np.ndarray:
        """Node positions ``(N, 3)`` at scalar time ``t``."""
        w = position_weights(self.keyframe_times, t)[0]
        return np.einsum("k,nkd->nd", w, self.positions)

    def rotations_at(self, t) -> np.ndarray:
        k, tau = locate(self.keyframe_times, np.atleast_1d(t))
        k, tau = int(k[0]), float(tau[0])
        return slerp(self.rotations[:, k], self.rotations[:, k + 1], tau)

    def poses_at(self, t):
        """Per-node ``(rotation (N, 4), translation (N, 3))`` at ``t``.

        The translation anchors each rotation at the node's canonical
        center: ``x -> R (x - c) + xi(t)``.
        """
        rot = self.rotations_at(t)
        xi = self.positions_at(t)
        rc = np.einsum("nij,nj->ni", quat_to_matrix(rot), self.centers)
        return rot, xi - rc


@dataclass(frozen=True)
class BindingTable:
    indices: np.ndarray  # (M, K) node indices
    weights: np.ndarray  # (M, K), rows sum to one

    def __len__(self) -> int:
        return self.indices.shape[0]

    def row(self, j: int):
        return list(zip(self.indices[j].tolist(), self.weights[j].tolist()))


def _centers_of(nodes) -> np.ndarray:
    if isinstance(nodes, NodeSet):
        return nodes.centers
    if len(nodes) and isinstance(nodes[0], Node):
        return np.stack([n.center for n in nodes])
    return np.asarray(nodes, dtype=float).reshape(-1, 3)


def _radii_of(nodes) -> np.ndarray:
    if isinstance(nodes, NodeSet):
        return nodes.radii
    return np.array([n.radius for n in nodes], dtype=float)


def knn_indices(points, centers, k: int) -> np.ndarray:
    """K nearest centers for each point, ties broken by lower index."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    if centers.shape[0] < k:
        raise InsufficientNodes(f"need {k} nodes, have {centers.shape[0]}")
    out = np.empty((points.shape[0], k), dtype=int)
    for start in range(0, points.shape[0], _KNN_CHUNK):
        chunk = points[start : start + _KNN_CHUNK]
        d2 = np.sum((chunk[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        out[start : start + chunk.shape[0]] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn_nodes(point, nodes, k: int) -> List[int]:
    return knn_indices(point, _centers_of(nodes), k)[0].tolist()


def _kernel_weights(points, centers, radii):
    """Normalized RBF weights for ``(M, K)`` neighborhoods.

    Rows whose kernels all underflow fall back to weight 1 on the nearest
    node so far-away primitives follow their closest node instead of NaN.
    """
    d2 = np.sum((points[:, None, :] - centers) ** 2, axis=-1)
    raw = np.exp(-d2 / (2.0 * radii**2))
    total = raw.sum(axis=1, keepdims=True)
    dead = total[:, 0] <= 0.0
    if np.any(dead):
        log.debug("%d primitives fell back to nearest-node binding", int(dead.sum()))
        raw[dead] = 0.0
        raw[dead, np.argmin(d2[dead], axis=1)] = 1.0
        total = raw.sum(axis=1, keepdims=True)
    return raw / total


def bind_weights(point, nodes, neighbor_indices) -> List[float]:
    idx = np.asarray(neighbor_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("neighbor_indices must not be empty")
    centers = _centers_of(nodes)[idx][None]
    radii = _radii_of(nodes)[idx][None]
    return _kernel_weights(np.asarray(point, dtype=float)[None], centers, radii)[0].tolist()


def build_binding(points, nodes: NodeSet, k: int = DEFAULT_K) -> BindingTable:
    """Bind canonical primitive centers to their ``k`` nearest nodes."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    k = min(k, len(nodes))
    idx = knn_indices(points, nodes.centers, k)
    weights = _kernel_weights(points, nodes.centers[idx], nodes.radii[idx])
    return BindingTable(idx, weights)


def initial_radii(centers, rank: int = RADIUS_NEIGHBOR_RANK, fallback: float = 1.0) -> np.ndarray:
    """Distance from each node to its ``rank``-th nearest other node.

    With fewer than ``rank + 1`` nodes the farthest available neighbor is
    used; a lone node (or coincident nodes) gets ``fallback``.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = centers.shape[0]
    if n < 2:
        return np.full(n, fallback)
    d = np.sqrt(np.sum((centers[:, None] - centers[None]) ** 2, axis=-1))
    d = np.sort(d, axis=1)[:, 1:]
    r = d[:, min(rank, n - 1) - 1]
    return np.where(r > 1e-12, r, fallback)


def node_se3_at(node: Node, t: float) -> SE3Pose:
    rot = eval_rotation(node.trajectory, t)
    xi = eval_position(node.trajectory, t)
    return SE3Pose(rot, xi - quat_to_matrix(rot) @ node.center)


def blend_poses(binding_indices, binding_weights, node_rot, node_trans):
    """Blend per-node poses into per-primitive ``(rotation, translation)``."""
    real, dual = poses_to_dq_arrays(node_rot, node_trans)
    return dqb_blend_arrays(binding_weights, real[binding_indices], dual[binding_indices])


def deform_points(points, binding: BindingTable, nodes: NodeSet, t: float):
    """Deform canonical points to time ``t``.

    Returns ``(points (M, 3), rotations (M, 4))``; the rotations are what
    covariances are conjugated with.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    node_rot, node_trans = nodes.poses_at(t)
    rot, trans = blend_poses(binding.indices, binding.weights, node_rot, node_trans)
    moved = np.einsum("mij,mj->mi", quat_to_matrix(rot), points) + trans
    return moved, rot


def deform_primitive(prim: Primitive, nodes, neighbors, t: float) -> Primitive:
    """Move one primitive to time ``t``.

    ``neighbors`` is that primitive's binding row: ``(node_index, weight)``
    pairs.
    """
    if not isinstance(nodes, NodeSet):
        nodes = NodeSet.from_nodes(list(nodes))
    idx = np.array([i for i, _ in neighbors], dtype=int)
    w = np.array([wt for _, wt in neighbors], dtype=float)
    node_rot, node_trans = nodes.poses_at(t)
    rot, trans = blend_poses(idx[None], w[None], node_rot, node_trans)
    r = quat_to_matrix(rot[0])
    cov = r @ prim.covariance @ r.T
    cov = 0.5 * (cov + cov.T)
    return Primitive(r @ prim.center + trans[0], cov, prim.opacity, prim.color.copy())


def neighbor_graph(centers, k: int = DEFAULT_K) -> np.ndarray:
    """Undirected kNN graph over node centers as sorted ``(E, 2)`` edges."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = centers.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=int)
    k = min(k, n - 1)
    idx = knn_indices(centers, centers, k + 1)
    edges = set()
    for i in range(n):
        for j in idx[i]:
            if j != i:
                edges.add((min(i, j), max(i, j)))
    return np.array(sorted(edges), dtype=int).reshape(-1, 2)


def edges_from_lists(neighbor_lists) -> np.ndarray:
    edges = {(min(i, j), max(i, j)) for i, nbrs in enumerate(neighbor_lists) for j in nbrs if i != j}
    return np.array(sorted(edges), dtype=int).reshape(-1, 2)


def arap_energy(nodes: NodeSet, neighbor_graph_, t_a: float, t_b: float):
    """Pairwise distance-preservation energy between two times.

    ``neighbor_graph_`` is either an ``(E, 2)`` edge array or per-node
    neighbor lists; each undirected edge is counted once. Returns
    ``(energy, gradient)`` with the gradient shaped like ``nodes.positions``.
    """
    edges = np.asarray(neighbor_graph_, dtype=int) if _is_edge_array(neighbor_graph_) else edges_from_lists(neighbor_graph_)
    grad = np.zeros_like(nodes.positions)
    if edges.size == 0:
        return 0.0, grad
    w_a = position_weights(nodes.keyframe_times, t_a)[0]
    w_b = position_weights(nodes.keyframe_times, t_b)[0]
    xa = np.einsum("k,nkd->nd", w_a, nodes.positions)
    xb = np.einsum("k,nkd->nd", w_b, nodes.positions)
    i, j = edges[:, 0], edges[:, 1]
    da_vec = xa[i] - xa[j]
    db_vec = xb[i] - xb[j]
    da = np.linalg.norm(da_vec, axis=1)
    db = np.linalg.norm(db_vec, axis=1)
    diff = da - db
    energy = float(np.sum(diff**2))
    # d|v|/dv = v/|v|, taken as zero for coincident endpoints
    ua = np.where(da[:, None] > 1e-12, da_vec / np.where(da > 1e-12, da, 1.0)[:, None], 0.0)
    ub = np.where(db[:, None] > 1e-12, db_vec / np.where(db > 1e-12, db, 1.0)[:, None], 0.0)
    ga = 2.0 * diff[:, None] * ua
    gb = -2.0 * diff[:, None] * ub
    gxa = np.zeros_like(xa)
    gxb = np.zeros_like(xb)
    np.add.at(gxa, i, ga)
    np.add.at(gxa, j, -ga)
    np.add.at(gxb, i, gb)
    np.add.at(gxb, j, -gb)
    grad += w_a[None, :, None] * gxa[:, None, :]
    grad += w_b[None, :, None] * gxb[:, None, :]
    return energy, grad


def _is_edge_array(graph) -> bool:
    if isinstance(graph, np.ndarray):
        return graph.ndim == 2 and graph.shape[1] == 2 and graph.dtype.kind in "iu"
    return False
