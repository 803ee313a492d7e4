"""Ground-truth evaluation of a node set against a scene bundle."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from ..deform_graph import BindingTable, NodeSet, build_binding, deform_points, knn_indices
from ..errors import SpanMismatch
from .generate import SceneBundle


def check_span(nodes: NodeSet, frame_times) -> None:
    lo, hi = nodes.span
    if frame_times[0] < lo - 1e-12 or frame_times[-1] > hi + 1e-12:
        raise SpanMismatch(
            f"node trajectories span [{lo}, {hi}] but frames span [{frame_times[0]}, {frame_times[-1]}]"
        )


def node_region_labels(bundle: SceneBundle, centers) -> np.ndarray:
    """Region of each node: the label of its nearest canonical primitive."""
    nearest = knn_indices(centers, bundle.centers, 1)[:, 0]
    return bundle.labels[nearest]


def density_ratio(bundle: SceneBundle, nodes: NodeSet) -> Optional[float]:
    """Dynamic over static node density, each normalized by region size.

    Region size is the region's primitive count. Returns ``None`` when the
    ratio is undefined (a region without primitives or without static
    nodes).
    """
    labels = bundle.labels
    n_dyn_prim = int(labels.sum())
    n_static_prim = int((~labels).sum())
    if n_dyn_prim == 0 or n_static_prim == 0 or len(nodes) == 0:
        return None
    node_labels = node_region_labels(bundle, nodes.centers)
    n_static_nodes = int((~node_labels).sum())
    if n_static_nodes == 0:
        return None
    return (int(node_labels.sum()) / n_dyn_prim) / (n_static_nodes / n_static_prim)


def eval_metrics(bundle: SceneBundle, nodes: NodeSet, binding: Optional[BindingTable] = None, threads: int = 1) -> dict:
    """RMSE of deformed primitives and anchored node trajectories.

    Keys: ``deformed_rmse`` and ``node_trajectory_rmse`` (meters),
    ``relative_rmse`` (fraction of the bounding-box diagonal),
    ``density_ratio`` (omitted when undefined), ``node_count``.
    """
    times = bundle.frame_times
    check_span(nodes, times)
    if binding is None:
        binding = build_binding(bundle.centers, nodes)
    if len(binding) != len(bundle.centers):
        raise SpanMismatch("binding table does not cover every primitive")

    def frame_sq_error(f: int) -> float:
        moved, _ = deform_points(bundle.centers, binding, nodes, times[f])
        return float(np.sum((moved - bundle.gt_points(f)) ** 2))

    frames = range(bundle.n_frames)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sq = list(pool.map(frame_sq_error, frames))
    else:
        sq = [frame_sq_error(f) for f in frames]
    n_samples = len(bundle.centers) * bundle.n_frames
    deformed_rmse = float(np.sqrt(sum(sq) / n_samples))

    report = {
        "deformed_rmse": deformed_rmse,
        "relative_rmse": deformed_rmse / bundle.bbox_diagonal if bundle.bbox_diagonal > 0 else 0.0,
        "bbox_diagonal": bundle.bbox_diagonal,
        "node_count": len(nodes),
        "primitive_count": len(bundle.centers),
        "frames": bundle.n_frames,
    }

    anchored = np.flatnonzero((nodes.anchors >= 0) & (nodes.anchors < len(bundle.track_primitive)))
    if anchored.size:
        prims = bundle.track_primitive[nodes.anchors[anchored]]
        err = 0.0
        for f in frames:
            xi = nodes.positions_at(times[f])[anchored]
            err += float(np.sum((xi - bundle.gt_points(f, prims)) ** 2))
        report["node_trajectory_rmse"] = float(np.sqrt(err / (anchored.size * bundle.n_frames)))
        report["anchored_nodes"] = int(anchored.size)

    ratio = density_ratio(bundle, nodes)
    if ratio is not None:
        report["density_ratio"] = ratio
    return report
