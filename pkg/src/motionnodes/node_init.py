"""Motion-adaptive node initialization.

Every valid image patch of every keyframe becomes a candidate node placed at
its back-projected center and described by its token and foreground prior.
Candidates are then merged voxel by voxel with bipartite soft matching. The
fraction of pairs merged inside a voxel shrinks as the voxel looks more
dynamic (high foreground prior, low token similarity), so static regions
thin out quickly while moving regions keep their density. The voxel size
grows by a fixed step each round until the node count reaches the target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .deform_graph import NodeSet, initial_radii
from .errors import EmptyCandidates, TargetNotReached
from .scene_harness.camera import Camera, backproject_points
from .scene_harness.generate import patch_centers
from .spline_traj import uniform_keyframes

log = logging.getLogger(__name__)

DEFAULT_KEYFRAMES = 8


@dataclass(frozen=True)
class CandidateNode:
    position: np.ndarray
    token: np.ndarray
    prior: float
    source_frame: int = 0
    merged_count: int = 1


@dataclass
class CandidateSet:
    """Structure-of-arrays candidate nodes.

    ``labels`` is an optional integer tag per candidate (region labels in
    tests and evaluation); a merged node keeps its representative's tag.
    """

    positions: np.ndarray
    tokens: np.ndarray
    priors: np.ndarray
    source_frames: np.ndarray
    merged_counts: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = self.positions.shape[0]
        self.tokens = np.asarray(self.tokens, dtype=float).reshape(n, -1)
        self.priors = np.asarray(self.priors, dtype=float).reshape(n)
        self.source_frames = np.asarray(self.source_frames, dtype=int).reshape(n)
        self.merged_counts = np.asarray(self.merged_counts, dtype=int).reshape(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).reshape(n)
        if np.any(self.priors < 0.0) or np.any(self.priors > 1.0):
            raise ValueError("foreground priors must lie in [0, 1]")
        if np.any(self.merged_counts < 1):
            raise ValueError("merged counts must be positive")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> CandidateNode:
        return CandidateNode(
            self.positions[i].copy(),
            self.tokens[i].copy(),
            float(self.priors[i]),
            int(self.source_frames[i]),
            int(self.merged_counts[i]),
        )

    @classmethod
    def from_nodes(cls, nodes: Sequence[CandidateNode], labels=None) -> "CandidateSet":
        return cls(
            np.stack([n.position for n in nodes]),
            np.stack([normalize_token(n.token) for n in nodes]),
            np.array([n.prior for n in nodes]),
            np.array([n.source_frame for n in nodes]),
            np.array([n.merged_count for n in nodes]),
            labels,
        )

    def subset(self, idx) -> "CandidateSet":
        idx = np.asarray(idx)
        return CandidateSet(
            self.positions[idx],
            self.tokens[idx],
            self.priors[idx],
            self.source_frames[idx],
            self.merged_counts[idx],
            None if self.labels is None else self.labels[idx],
        )

    @staticmethod
    def concatenate(parts: Sequence["CandidateSet"]) -> "CandidateSet":
        labels = None
        if all(p.labels is not None for p in parts):
            labels = np.concatenate([p.labels for p in parts])
        return CandidateSet(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.tokens for p in parts]),
            np.concatenate([p.priors for p in parts]),
            np.concatenate([p.source_frames for p in parts]),
            np.concatenate([p.merged_counts for p in parts]),
            labels,
        )


@dataclass(frozen=True)
class CompressionParams:
    """Knobs of the iterative compression.

    ``v_init`` and ``delta_v`` default (``None``) to 1% of the candidate
    bounding-box diagonal.
    """

    v_init: Optional[float] = None
    delta_v: Optional[float] = None
    r_min: float = 0.1
    r_max: float = 0.9
    eta: float = 0.5
    alpha_dyn: float = 2.0
    beta_dyn: float = 2.0
    target_count: int = 100
    max_iterations: int = 32

    def __post_init__(self):
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise ValueError("need 0 <= r_min <= r_max <= 1")
        if self.eta < 0 or self.alpha_dyn < 0 or self.beta_dyn < 0:
            raise ValueError("eta, alpha_dyn and beta_dyn must be nonnegative")
        if self.target_count < 1 or self.max_iterations < 1:
            raise ValueError("target_count and max_iterations must be positive")
        for v in (self.v_init, self.delta_v):
            if v is not None and v <= 0:
                raise ValueError("voxel sizes must be positive")

    def resolved(self, positions) -> "CompressionParams":
        if self.v_init is not None and self.delta_v is not None:
            return self
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        diag = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
        base = 0.01 * diag if diag > 0 else 1.0
        v_init = self.v_init if self.v_init is not None else base
        return replace(self, v_init=v_init, delta_v=self.delta_v if self.delta_v is not None else v_init)


@dataclass
class PatchFrame:
    tokens: np.ndarray  # (P, d)
    depth: np.ndarray  # (P,), <= 0 or non-finite marks an invalid patch
    prior: np.ndarray  # (P,)
    frame: int = 0


def normalize_token(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def patch_to_nodes(frames, patch_size: float, cameras: Sequence[Camera], labels=None) -> CandidateSet:
    """Back-project every valid patch center of every frame.

    ``frames[i]`` is a :class:`PatchFrame` (or a ``(tokens, depth, prior)``
    tuple) seen by ``cameras[i]``; patches are laid out row-major over the
    camera's image. ``labels`` optionally gives per-frame, per-patch integer
    tags carried onto the candidates.
    """
    parts = []
    for i, (fr, cam) in enumerate(zip(frames, cameras)):
        if not isinstance(fr, PatchFrame):
            fr = PatchFrame(*fr) if len(fr) == 4 else PatchFrame(*fr, frame=i)
        cols = int(cam.width // patch_size)
        rows = int(cam.height // patch_size)
        depth = np.asarray(fr.depth, dtype=float).reshape(-1)
        if depth.size != rows * cols:
            raise ValueError(f"frame {fr.frame}: {depth.size} patches, camera grid is {rows}x{cols}")
        ok = np.isfinite(depth) & (depth > 0.0)
        if not np.any(ok):
            continue
        centers = patch_centers(rows, cols, patch_size)[ok]
        tokens = normalize_token(np.asarray(fr.tokens, dtype=float).reshape(depth.size, -1)[ok])
        tag = None if labels is None else np.asarray(labels[i]).reshape(-1)[ok]
        parts.append(
            CandidateSet(
                backproject_points(centers, depth[ok], cam),
                tokens,
                np.asarray(fr.prior, dtype=float).reshape(-1)[ok],
                np.full(int(ok.sum()), fr.frame),
                np.ones(int(ok.sum()), dtype=int),
                tag,
            )
        )
    if not parts:
        raise EmptyCandidates("no patch had a valid depth")
    return CandidateSet.concatenate(parts)


def token_similarity(a: CandidateNode, b: CandidateNode, eta: float) -> float:
    """Token cosine minus ``eta`` times the pair's mean foreground prior."""
    cos = float(np.dot(a.token, b.token) / (np.linalg.norm(a.token) * np.linalg.norm(b.token)))
    return cos - eta * 0.5 * (a.prior + b.prior)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _dyn_score_from_means(mean_prior: float, mean_sim: float, alpha_dyn: float, beta_dyn: float) -> float:
    return _sigmoid(alpha_dyn * mean_prior - beta_dyn * mean_sim)


def dyn_score(cluster_nodes, matched_pairs, alpha_dyn: float, beta_dyn: float) -> float:
    """Dynamic tendency of a voxel cluster.

    ``matched_pairs`` holds ``(i, j, sim)`` triples; with no pairs the mean
    similarity is taken as 1, i.e. the cluster is presumed static.
    """
    priors = [n.prior for n in cluster_nodes]
    if not priors:
        raise ValueError("cluster must not be empty")
    sims = [s for _, _, s in matched_pairs]
    mean_sim = float(np.mean(sims)) if sims else 1.0
    return _dyn_score_from_means(float(np.mean(priors)), mean_sim, alpha_dyn, beta_dyn)


def adaptive_ratio(p_dyn: float, r_min: float, r_max: float) -> float:
    if r_min > r_max:
        raise ValueError("r_min must not exceed r_max")
    return r_min + (1.0 - p_dyn) * (r_max - r_min)


def merge_count(ratio: float, n_a: int) -> int:
    """Number of pairs merged for ratio ``ratio`` of ``n_a`` matchable nodes."""
    return int(min(n_a, max(0, math.floor(ratio * n_a + 0.5))))


def voxel_keys(positions, voxel_size: float, origin) -> np.ndarray:
    return np.floor((np.asarray(positions) - origin) / voxel_size).astype(np.int64)


def _voxel_groups(keys: np.ndarray) -> List[np.ndarray]:
    order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    breaks = np.flatnonzero(np.any(sk[1:] != sk[:-1], axis=1)) + 1
    return np.split(order, breaks)


def compress_step(cands: CandidateSet, voxel_size: float, params: CompressionParams, origin=None) -> CandidateSet:
    """One round of per-voxel bipartite soft matching.

    Inside a voxel nodes are ordered lexicographically by position and split
    into A (even positions) and B (odd positions). Each A node points at its
    most similar B node; the top pairs by similarity are merged into their B
    node, whose position and token become merged_count-weighted means.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cands) == 0:
        return cands
    pos = cands.positions
    origin = pos.min(axis=0) if origin is None else np.asarray(origin, dtype=float)
    keys = voxel_keys(pos, voxel_size, origin)

    new_pos = pos.copy()
    new_tok = cands.tokens.copy()
    new_prior = cands.priors.copy()
    new_count = cands.merged_counts.copy()
    keep: List[np.ndarray] = []
    for group in _voxel_groups(keys):
        if group.size == 1:
            keep.append(group)
            continue
        local = group[np.lexsort((group, pos[group, 2], pos[group, 1], pos[group, 0]))]
        a, b = local[0::2], local[1::2]
        sim = cands.tokens[a] @ cands.tokens[b].T
        sim -= params.eta * 0.5 * (cands.priors[a][:, None] + cands.priors[b][None, :])
        best = np.argmax(sim, axis=1)
        best_sim = sim[np.arange(a.size), best]
        p_dyn = _dyn_score_from_means(
            float(cands.priors[group].mean()), float(best_sim.mean()), params.alpha_dyn, params.beta_dyn
        )
        n_merge = merge_count(adaptive_ratio(p_dyn, params.r_min, params.r_max), a.size)
        ranked = np.argsort(-best_sim, kind="stable")
        merged = ranked[:n_merge]
        for dst in np.unique(best[merged]):
            srcs = a[merged[best[merged] == dst]]
            members = np.concatenate([[b[dst]], srcs])
            w = cands.merged_counts[members].astype(float)
            target = b[dst]
            new_pos[target] = w @ pos[members] / w.sum()
            new_tok[target] = normalize_token(w @ cands.tokens[members])
            new_prior[target] = cands.priors[members].max()
            new_count[target] = int(cands.merged_counts[members].sum())
        gone = np.zeros(local.size, dtype=bool)
        gone[0::2][merged] = True
        keep.append(local[~gone])
    idx = np.concatenate(keep)
    return CandidateSet(
        new_pos[idx],
        new_tok[idx],
        new_prior[idx],
        cands.source_frames[idx],
        new_count[idx],
        None if cands.labels is None else cands.labels[idx],
    )


@dataclass
class CompressionResult:
    nodes: NodeSet
    survivors: CandidateSet
    iterations: int
    counts: List[int] = field(default_factory=list)


def candidates_to_nodes(cands: CandidateSet, keyframe_times=None) -> NodeSet:
    times = uniform_keyframes(DEFAULT_KEYFRAMES) if keyframe_times is None else keyframe_times
    return NodeSet.static(
        cands.positions,
        times,
        radii=initial_radii(cands.positions),
        merged_counts=cands.merged_counts,
        priors=cands.priors,
    )


def compress(cands: CandidateSet, params: CompressionParams, keyframe_times=None, origin=None) -> CompressionResult:
    """Iterate :func:`compress_step` with growing voxels down to the target.

    Raises :class:`TargetNotReached` (carrying the partial result) when
    ``max_iterations`` rounds leave more than ``target_count`` nodes.
    """
    if len(cands) == 0:
        raise EmptyCandidates("nothing to compress")
    params = params.resolved(cands.positions)
    origin = cands.positions.min(axis=0) if origin is None else origin
    counts = [len(cands)]
    k = 0
    while len(cands) > params.target_count and k < params.max_iterations:
        cands = compress_step(cands, params.v_init + k * params.delta_v, params, origin)
        k += 1
        counts.append(len(cands))
        log.debug("compress iteration %d: %d nodes", k, len(cands))
    result = CompressionResult(candidates_to_nodes(cands, keyframe_times), cands, k, counts)
    if len(cands) > params.target_count:
        raise TargetNotReached(len(cands), params.target_count, result)
    return result
