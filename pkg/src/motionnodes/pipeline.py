"""Bundle-level glue between scene data, node initialization and fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .deform_graph import NodeSet, initial_radii, neighbor_graph
from .errors import RankDeficient
from .node_init import CandidateSet, PatchFrame, patch_to_nodes
from .optimize import OptimData
from .scene_harness.camera import backproject_points
from .scene_harness.generate import SceneBundle
from .spline_traj import fit_spline

log = logging.getLogger(__name__)

ANCHOR_CANDIDATES = 32


def candidates_from_bundle(bundle: SceneBundle) -> CandidateSet:
    """Candidates from every patch frame; labels are 1 where the prior marks foreground."""
    frames = [
        PatchFrame(bundle.patch_tokens[i], bundle.patch_depth[i], bundle.patch_prior[i], int(f))
        for i, f in enumerate(bundle.patch_frames)
    ]
    cams = [bundle.cameras[f] for f in bundle.patch_frames]
    labels = [(bundle.patch_prior[i] > 0.5).astype(int) for i in range(len(frames))]
    return patch_to_nodes(frames, bundle.config.patch_size, cams, labels)


def balanced_subset(cands: CandidateSet) -> CandidateSet:
    """Evenly thin the larger label group so both groups have equal size."""
    groups = [np.flatnonzero(cands.labels == v) for v in (0, 1)]
    n = min(len(g) for g in groups)
    picked = [g[np.linspace(0, len(g) - 1, n).round().astype(int)] if n else g[:0] for g in groups]
    return cands.subset(np.sort(np.concatenate(picked)))


def tracklet_points(bundle: SceneBundle) -> np.ndarray:
    """Back-projected tracklets ``(T, F, 3)``, NaN where not visible."""
    n_t, n_f = bundle.track_visible.shape
    out = np.full((n_t, n_f, 3), np.nan)
    for f in range(n_f):
        vis = bundle.track_visible[:, f]
        if np.any(vis):
            out[vis, f] = backproject_points(bundle.track_pixels[vis, f], bundle.track_depths[vis, f], bundle.cameras[f])
    return out


def anchor_nodes(nodes: NodeSet, survivors: CandidateSet, bundle: SceneBundle) -> NodeSet:
    """Attach each node to the tracklet closest to it at its source frame.

    Among each node's nearest tracklets, those visible in every frame are
    preferred, then closer ones; assignment is greedy in that order and
    prefers tracklets nobody holds yet. A node left over shares its nearest
    tracklet. The node's canonical center
    becomes that tracklet's frame-0 position and its trajectory is reset to
    static there; radii are recomputed for the moved centers.
    """
    pts = tracklet_points(bundle)
    n = len(nodes)
    if pts.shape[0] == 0:
        return nodes.copy()
    partial = ~bundle.track_visible.all(axis=1)
    proposals = []
    nearest = np.full(n, -1)
    for i in range(n):
        f = int(survivors.source_frames[i])
        d = np.linalg.norm(pts[:, f] - survivors.positions[i], axis=1)
        d = np.where(np.isnan(d), np.inf, d)
        order = np.argsort(d, kind="stable")[:ANCHOR_CANDIDATES]
        order = order[np.isfinite(d[order])]
        if order.size:
            nearest[i] = order[0]
        proposals.extend((bool(partial[k]), float(d[k]), i, int(k)) for k in order)
    proposals.sort()
    anchors = np.full(n, -1)
    taken = set()
    for _, _, i, k in proposals:
        if anchors[i] < 0 and k not in taken:
            anchors[i] = k
            taken.add(k)
    anchors = np.where(anchors < 0, nearest, anchors)

    centers = nodes.centers.copy()
    for i in np.flatnonzero(anchors >= 0):
        track = pts[anchors[i]]
        first = np.flatnonzero(~np.isnan(track[:, 0]))[0]
        centers[i] = track[first]
    out = NodeSet.static(
        centers,
        nodes.keyframe_times,
        anchors=anchors,
        merged_counts=nodes.merged_counts,
        priors=nodes.priors,
    )
    return out


@dataclass
class FitReport:
    residual_rms: np.ndarray  # per node, meters; NaN for nodes left static
    static_nodes: List[int] = field(default_factory=list)


def fit_nodes(bundle: SceneBundle, nodes: NodeSet, keyframe_times=None):
    """Fit every anchored node's spline to its back-projected tracklet.

    Nodes without a usable tracklet keep a static trajectory at their
    center. The canonical center of a fitted node is its position at time 0.
    """
    times = nodes.keyframe_times if keyframe_times is None else np.asarray(keyframe_times, dtype=float)
    pts = tracklet_points(bundle)
    out = NodeSet.static(
        nodes.centers,
        times,
        radii=nodes.radii,
        anchors=nodes.anchors,
        merged_counts=nodes.merged_counts,
        priors=nodes.priors,
    )
    rms = np.full(len(nodes), np.nan)
    static = []
    for i in range(len(nodes)):
        k = int(nodes.anchors[i])
        if k < 0 or k >= pts.shape[0]:
            static.append(i)
            continue
        vis = ~np.isnan(pts[k, :, 0])
        try:
            traj, residual = fit_spline(bundle.frame_times[vis], pts[k, vis], times)
        except RankDeficient:
            static.append(i)
            continue
        out.positions[i] = traj.positions
        out.centers[i] = traj.positions[0]
        rms[i] = np.sqrt(residual / vis.sum())
    if static:
        log.warning("%d nodes have no usable tracklet and stay static", len(static))
    out.radii = initial_radii(out.centers)
    return out, FitReport(rms, static)


def optim_data_from_bundle(bundle: SceneBundle, nodes: NodeSet, k_graph: int = 4) -> OptimData:
    """Tracklet observations of anchored nodes plus the node kNN graph."""
    n_tracks = len(bundle.track_primitive)
    anchor_map = np.full(n_tracks, -1)
    for i, k in enumerate(nodes.anchors):
        if 0 <= k < n_tracks and anchor_map[k] < 0:
            anchor_map[k] = i
    return OptimData.build(
        bundle.frame_times,
        bundle.cameras,
        bundle.track_pixels,
        bundle.track_depths,
        bundle.track_visible,
        anchor_map,
        neighbor_graph(nodes.centers, k_graph),
    )
