"""Versioned line-oriented file formats.

Bundles and node sets are JSON Lines: one record per line, each an object
with a ``record`` field naming its type. The first line is always a
``header`` record carrying ``format_version``. Reals are written with 17
significant digits so that reading and re-writing a file reproduces it byte
for byte. Readers reject files whose major version differs from the one
they understand.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator, List

import numpy as np

from ..deform_graph import NodeSet
from ..errors import FormatError
from ..rigid_math import quat_canonical
from .camera import Camera
from .config import SceneConfig
from .generate import BUNDLE_FORMAT_VERSION, SceneBundle

NODES_FORMAT_VERSION = "1.0"
METRICS_FORMAT_VERSION = "1.0"
LOSSLOG_FORMAT_VERSION = "1.0"


def encode(value) -> str:
    """JSON text for ``value`` with reals at 17 significant digits."""
    if value is None or isinstance(value, (bool, np.bool_)):
        return json.dumps(None if value is None else bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise FormatError(f"cannot serialize non-finite value {v}")
        # + 0.0 folds -0.0 into 0.0 so rewrites stay byte-identical
        return format(v + 0.0, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {encode(v)}" for k, v in value.items()) + "}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(encode(v) for v in value) + "]"
    raise FormatError(f"cannot serialize {type(value).__name__}")


def write_records(path, records) -> None:
    text = "".join(encode(r) + "\n" for r in records)
    Path(path).write_text(text)


def read_records(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict) or "record" not in rec:
                raise FormatError(f"{path}:{lineno}: not a record")
            yield rec


def check_major(found, supported: str, what: str) -> None:
    if found is None or str(found).split(".")[0] != supported.split(".")[0]:
        raise FormatError(f"unsupported {what} format_version {found!r} (reader supports {supported})")


def _expect_header(records: List[dict], kind: str, supported: str, path) -> dict:
    if not records or records[0]["record"] != "header":
        raise FormatError(f"{path}: missing header record")
    header = records[0]
    if header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {header.get('kind')!r}")
    check_major(header.get("format_version"), supported, kind)
    return header


def bundle_records(bundle: SceneBundle):
    cfg = bundle.config
    yield {
        "record": "header",
        "kind": "bundle",
        "format_version": bundle.format_version,
        "seed": bundle.seed,
        "frames": bundle.n_frames,
        "frame_times": bundle.frame_times,
        "patch_size": cfg.patch_size,
        "patch_rows": bundle.patch_rows,
        "patch_cols": bundle.patch_cols,
        "token_dim": cfg.token_dim,
        "bbox_min": bundle.bbox_min,
        "bbox_max": bundle.bbox_max,
        "config": cfg.to_dict(),
    }
    for f, cam in enumerate(bundle.cameras):
        yield {
            "record": "camera",
            "frame": f,
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
            "rotation": cam.rotation.ravel(),
            "translation": cam.translation,
        }
    for o, name in enumerate(bundle.object_names):
        yield {
            "record": "object",
            "index": o,
            "name": name,
            "label": "dynamic" if bundle.object_dynamic[o] else "static",
            "rotations": quat_canonical(bundle.object_rotations[o]),
            "translations": bundle.object_translations[o],
        }
    for j in range(len(bundle.centers)):
        cov = bundle.covariances[j]
        yield {
            "record": "primitive",
            "index": j,
            "object": int(bundle.primitive_object[j]),
            "center": bundle.centers[j],
            "covariance": [cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]],
            "opacity": bundle.opacities[j],
            "color": bundle.colors[j],
        }
    for i, f in enumerate(bundle.patch_frames):
        yield {
            "record": "patches",
            "frame": int(f),
            "depth": bundle.patch_depth[i],
            "prior": bundle.patch_prior[i],
            "tokens": bundle.patch_tokens[i],
        }
    for k in range(len(bundle.track_primitive)):
        yield {
            "record": "tracklet",
            "index": k,
            "primitive": int(bundle.track_primitive[k]),
            "pixels": bundle.track_pixels[k],
            "depths": bundle.track_depths[k],
            "visible": bundle.track_visible[k].astype(int),
        }


def write_bundle(path, bundle: SceneBundle) -> None:
    write_records(path, bundle_records(bundle))


def read_bundle(path) -> SceneBundle:
    records = list(read_records(path))
    header = _expect_header(records, "bundle", BUNDLE_FORMAT_VERSION, path)
    by_kind = {}
    for rec in records[1:]:
        by_kind.setdefault(rec["record"], []).append(rec)
    try:
        cameras = [
            Camera(
                r["fx"], r["fy"], r["cx"], r["cy"], r["width"], r["height"],
                np.array(r["rotation"], dtype=float).reshape(3, 3), r["translation"],
            )
            for r in sorted(by_kind.get("camera", []), key=lambda r: r["frame"])
        ]
        objs = sorted(by_kind.get("object", []), key=lambda r: r["index"])
        prims = sorted(by_kind.get("primitive", []), key=lambda r: r["index"])
        patches = sorted(by_kind.get("patches", []), key=lambda r: r["frame"])
        tracks = sorted(by_kind.get("tracklet", []), key=lambda r: r["index"])
        n_frames = int(header["frames"])
        if len(cameras) != n_frames:
            raise FormatError(f"{path}: expected {n_frames} cameras, found {len(cameras)}")
        cov6 = np.array([p["covariance"] for p in prims], dtype=float).reshape(-1, 6)
        covs = np.empty((len(prims), 3, 3))
        for (a, b), col in zip([(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)], range(6)):
            covs[:, a, b] = cov6[:, col]
            covs[:, b, a] = cov6[:, col]
        n_patch = int(header["patch_rows"]) * int(header["patch_cols"])
        d = int(header["token_dim"])
        return SceneBundle(
            config=SceneConfig.from_dict(header["config"]),
            seed=int(header["seed"]),
            frame_times=np.array(header["frame_times"], dtype=float),
            cameras=cameras,
            object_names=[o["name"] for o in objs],
            object_dynamic=np.array([o["label"] == "dynamic" for o in objs], dtype=bool),
            object_rotations=np.array([o["rotations"] for o in objs], dtype=float).reshape(-1, n_frames, 4),
            object_translations=np.array([o["translations"] for o in objs], dtype=float).reshape(-1, n_frames, 3),
            centers=np.array([p["center"] for p in prims], dtype=float).reshape(-1, 3),
            covariances=covs,
            opacities=np.array([p["opacity"] for p in prims], dtype=float),
            colors=np.array([p["color"] for p in prims], dtype=float).reshape(-1, 3),
            primitive_object=np.array([p["object"] for p in prims], dtype=int),
            patch_frames=np.array([p["frame"] for p in patches], dtype=int),
            patch_depth=np.array([p["depth"] for p in patches], dtype=float).reshape(-1, n_patch),
            patch_prior=np.array([p["prior"] for p in patches], dtype=float).reshape(-1, n_patch),
            patch_tokens=np.array([p["tokens"] for p in patches], dtype=float).reshape(-1, n_patch, d),
            track_pixels=np.array([t["pixels"] for t in tracks], dtype=float).reshape(-1, n_frames, 2),
            track_depths=np.array([t["depths"] for t in tracks], dtype=float).reshape(-1, n_frames),
            track_visible=np.array([t["visible"] for t in tracks], dtype=bool).reshape(-1, n_frames),
            track_primitive=np.array([t["primitive"] for t in tracks], dtype=int),
            bbox_min=np.array(header["bbox_min"], dtype=float),
            bbox_max=np.array(header["bbox_max"], dtype=float),
            format_version=str(header["format_version"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed bundle ({exc})") from None


def write_nodes(path, nodes: NodeSet, extra_header=None) -> None:
    header = {
        "record": "header",
        "kind": "nodes",
        "format_version": NODES_FORMAT_VERSION,
        "count": len(nodes),
        "keyframe_times": nodes.keyframe_times,
    }
    header.update(extra_header or {})
    records = [header]
    for i in range(len(nodes)):
        records.append(
            {
                "record": "node",
                "index": i,
                "center": nodes.centers[i],
                "radius": nodes.radii[i],
                "positions": nodes.positions[i],
                "rotations": quat_canonical(nodes.rotations[i]),
                "anchor": int(nodes.anchors[i]),
                "merged_count": int(nodes.merged_counts[i]),
                "prior": nodes.priors[i],
            }
        )
    write_records(path, records)


def read_nodes(path) -> NodeSet:
    records = list(read_records(path))
    header = _expect_header(records, "nodes", NODES_FORMAT_VERSION, path)
    rows = sorted((r for r in records[1:] if r["record"] == "node"), key=lambda r: r["index"])
    times = np.array(header["keyframe_times"], dtype=float)
    k = times.size
    try:
        return NodeSet(
            centers=np.array([r["center"] for r in rows], dtype=float).reshape(-1, 3),
            radii=np.array([r["radius"] for r in rows], dtype=float),
            keyframe_times=times,
            positions=np.array([r["positions"] for r in rows], dtype=float).reshape(-1, k, 3),
            rotations=np.array([r["rotations"] for r in rows], dtype=float).reshape(-1, k, 4),
            anchors=np.array([r.get("anchor", -1) for r in rows], dtype=int),
            merged_counts=np.array([r.get("merged_count", 1) for r in rows], dtype=int),
            priors=np.array([r.get("prior", 0.0) for r in rows], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed node file ({exc})") from None


def read_nodes_header(path) -> dict:
    for rec in read_records(path):
        return rec
    raise FormatError(f"{path}: empty node file")


def write_metrics(path, report: dict) -> None:
    data = {"format_version": METRICS_FORMAT_VERSION}
    data.update(report)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_metrics(path) -> dict:
    data = json.loads(Path(path).read_text())
    check_major(data.get("format_version"), METRICS_FORMAT_VERSION, "metrics")
    return data
