"""Seeded synthetic dynamic scenes with exact ground truth.

Objects are analytic shapes (finite planes and boxes) moving rigidly. Their
pose at frame ``f`` maps canonical (frame 0) coordinates to frame ``f``, so
every primitive's ground-truth motion is its object's pose sequence. Depths,
masks and tracklet visibility come from exact ray casting against the posed
shapes, which keeps all observations consistent with the geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..rigid_math import quat_from_axis_angle, quat_to_matrix, random_quaternions
from .camera import Camera, project_points
from .config import ObjectConfig, SceneConfig, validate_scene_config

BUNDLE_FORMAT_VERSION = "1.0"
_VISIBILITY_TOL = 1e-6


@dataclass
class SceneBundle:
    config: SceneConfig
    seed: int
    frame_times: np.ndarray  # (F,) normalized time
    cameras: List[Camera]
    object_names: List[str]
    object_dynamic: np.ndarray  # (O,) bool
    object_rotations: np.ndarray  # (O, F, 4) canonical -> frame f
    object_translations: np.ndarray  # (O, F, 3)
    centers: np.ndarray  # (M, 3) canonical primitive centers
    covariances: np.ndarray  # (M, 3, 3)
    opacities: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3)
    primitive_object: np.ndarray  # (M,)
    patch_frames: np.ndarray  # (P,) frame indices with patch data
    patch_depth: np.ndarray  # (P, rows * cols), 0 where no surface was hit
    patch_prior: np.ndarray  # (P, rows * cols) foreground prior in [0, 1]
    patch_tokens: np.ndarray  # (P, rows * cols, d) unit tokens
    track_pixels: np.ndarray  # (T, F, 2)
    track_depths: np.ndarray  # (T, F)
    track_visible: np.ndarray  # (T, F) bool
    track_primitive: np.ndarray  # (T,) primitive each tracklet follows
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    format_version: str = BUNDLE_FORMAT_VERSION

    @property
    def n_frames(self) -> int:
        return self.frame_times.size

    @property
    def patch_rows(self) -> int:
        return self.config.height // self.config.patch_size

    @property
    def patch_cols(self) -> int:
        return self.config.width // self.config.patch_size

    @property
    def labels(self) -> np.ndarray:
        """Per-primitive region label, True for dynamic."""
        return self.object_dynamic[self.primitive_object]

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def gt_points(self, frame: int, indices=None) -> np.ndarray:
        idx = np.arange(len(self.centers)) if indices is None else np.asarray(indices)
        obj = self.primitive_object[idx]
        r = quat_to_matrix(self.object_rotations[obj, frame])
        return np.einsum("nij,nj->ni", r, self.centers[idx]) + self.object_translations[obj, frame]

    def gt_pose(self, primitive: int, frame: int):
        obj = self.primitive_object[primitive]
        return self.object_rotations[obj, frame], self.object_translations[obj, frame]

    def patch_centers(self) -> np.ndarray:
        return patch_centers(self.patch_rows, self.patch_cols, self.config.patch_size)


def patch_centers(rows: int, cols: int, patch_size: float) -> np.ndarray:
    """Pixel coordinates of patch centers, row-major, ``(rows * cols, 2)``."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([(c.ravel() + 0.5) * patch_size, (r.ravel() + 0.5) * patch_size], axis=1)


def object_poses(obj: ObjectConfig, frames: int):
    """``(rotations (F, 4), translations (F, 3))`` for one object."""
    f = np.arange(frames, dtype=float)
    center = np.asarray(obj.center, dtype=float)
    if obj.motion == "static":
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (frames, 1))
        trans = np.zeros((frames, 3))
    elif obj.motion == "rigid-translation":
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (frames, 1))
        trans = f[:, None] * np.asarray(obj.velocity, dtype=float)
    else:
        axis = np.asarray(obj.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        rot = quat_from_axis_angle(np.tile(axis, (frames, 1)), obj.angular_speed * f)
        trans = center - np.einsum("fij,j->fi", quat_to_matrix(rot), center)
        if obj.motion == "screw":
            trans = trans + (obj.axial_speed * f)[:, None] * axis
    return rot, trans


def object_speed(obj: ObjectConfig) -> float:
    """Largest point speed on the object, meters per frame."""
    extent = 0.5 * float(np.linalg.norm(obj.size))
    if obj.motion == "static":
        return 0.0
    if obj.motion == "rigid-translation":
        return float(np.linalg.norm(obj.velocity))
    return abs(obj.angular_speed) * extent + (abs(obj.axial_speed) if obj.motion == "screw" else 0.0)


def _sample_surface(obj: ObjectConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    center = np.asarray(obj.center, dtype=float)
    if obj.shape == "plane":
        sx, sy = obj.size
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        return center + np.stack([uv[:, 0] * sx, uv[:, 1] * sy, np.zeros(n)], axis=1)
    size = np.asarray(obj.size, dtype=float)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    face_p = np.repeat(areas, 2) / (2.0 * areas.sum())
    faces = rng.choice(6, size=n, p=face_p)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    axis = faces // 2
    side = np.where(faces % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = side * size[axis]
    return center + pts


def _covariances(n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    r = quat_to_matrix(random_quaternions(rng, n))
    s = rng.uniform(0.5, 1.5, size=(n, 3)) * scale
    cov = np.einsum("nij,nj,nkj->nik", r, s**2, r)
    return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


def _ray_hits(obj: ObjectConfig, rot, trans, origin, dirs) -> np.ndarray:
    """Ray parameter of the first hit per ray, ``inf`` where missed."""
    r = quat_to_matrix(rot)
    o = r.T @ (origin - trans)
    d = dirs @ r
    center = np.asarray(obj.center, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.shape == "plane":
            s = (center[2] - o[2]) / d[:, 2]
            p = o + s[:, None] * d
            half = 0.5 * np.asarray(obj.size, dtype=float)
            inside = (np.abs(p[:, 0] - center[0]) <= half[0]) & (np.abs(p[:, 1] - center[1]) <= half[1])
            ok = np.isfinite(s) & (s > 0.0) & inside
            return np.where(ok, s, np.inf)
        half = 0.5 * np.asarray(obj.size, dtype=float)
        t1 = (center - half - o) / d
        t2 = (center + half - o) / d
        lo = np.nanmax(np.minimum(t1, t2), axis=1)
        hi = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (hi >= lo) & (lo > 0.0)
        return np.where(ok, lo, np.inf)


def _first_hit(cfg: SceneConfig, poses, frame: int, cam: Camera, pixels):
    dirs = cam.pixel_rays(pixels)
    origin = cam.center
    best = np.full(len(pixels), np.inf)
    who = np.full(len(pixels), -1)
    for o, obj in enumerate(cfg.objects):
        s = _ray_hits(obj, poses[0][o, frame], poses[1][o, frame], origin, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        who = np.where(closer, o, who)
    return best, who


def _make_cameras(cfg: SceneConfig) -> List[Camera]:
    cams = []
    step = np.asarray(cfg.camera_translation_per_frame, dtype=float)
    for f in range(cfg.frames):
        yaw = cfg.camera_yaw_per_frame * f
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        center = step * f
        cams.append(Camera(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height, r, -r @ center))
    return cams


def gen_scene(cfg: SceneConfig, seed: int) -> SceneBundle:
    validate_scene_config(cfg)
    rng = np.random.default_rng(seed)
    n_frames = cfg.frames
    n_obj = len(cfg.objects)
    cameras = _make_cameras(cfg)

    rots = np.zeros((n_obj, n_frames, 4))
    trans = np.zeros((n_obj, n_frames, 3))
    for o, obj in enumerate(cfg.objects):
        rots[o], trans[o] = object_poses(obj, n_frames)
    poses = (rots, trans)

    centers, covs, opac, colors, owner = [], [], [], [], []
    for o, obj in enumerate(cfg.objects):
        n = obj.primitives
        centers.append(_sample_surface(obj, n, rng))
        covs.append(_covariances(n, obj.primitive_scale, rng))
        opac.append(rng.uniform(0.2, 0.95, size=n))
        colors.append(np.clip(np.asarray(obj.color) + rng.normal(0.0, 0.05, size=(n, 3)), 0.0, 1.0))
        owner.append(np.full(n, o))
    centers = np.concatenate(centers)
    covs = np.concatenate(covs)
    opac = np.concatenate(opac)
    colors = np.concatenate(colors)
    owner = np.concatenate(owner)
    dynamic = np.array([obj.dynamic for obj in cfg.objects])

    # tokens: object base + per-frame drift scaled by motion + per-patch jitter
    d = cfg.token_dim
    base = rng.normal(size=(n_obj + 1, d))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    sigma = np.array(
        [cfg.token_static_noise + cfg.token_motion_scale * object_speed(obj) for obj in cfg.objects]
        + [cfg.token_static_noise]
    )
    frame_drift = rng.normal(size=(n_obj + 1, n_frames, d)) * sigma[:, None, None]

    rows, cols = cfg.height // cfg.patch_size, cfg.width // cfg.patch_size
    pix = patch_centers(rows, cols, cfg.patch_size)
    patch_frames = np.asarray(cfg.patch_frames, dtype=int)
    p_depth = np.zeros((patch_frames.size, rows * cols))
    p_prior = np.zeros((patch_frames.size, rows * cols))
    p_tokens = np.zeros((patch_frames.size, rows * cols, d))
    for i, f in enumerate(patch_frames):
        depth, who = _first_hit(cfg, poses, f, cameras[f], pix)
        hit = who >= 0
        if cfg.depth_noise > 0:
            depth = depth + np.where(hit, rng.normal(0.0, cfg.depth_noise, size=depth.shape), 0.0)
            hit &= depth > 0
        p_depth[i] = np.where(hit, depth, 0.0)
        fg = hit & dynamic[np.where(hit, who, 0)]
        p_prior[i] = np.where(fg, 1.0 - cfg.prior_softness, cfg.prior_softness)
        src = np.where(hit, who, n_obj)
        tok = base[src] + frame_drift[src, f] + rng.normal(size=(rows * cols, d)) * cfg.token_patch_noise
        p_tokens[i] = tok / np.linalg.norm(tok, axis=1, keepdims=True)

    visible0 = _visible(cfg, poses, 0, cameras[0], centers, owner)
    pool = np.flatnonzero(visible0)
    n_tracks = min(cfg.tracklets, pool.size)
    track_prim = np.sort(rng.choice(pool, size=n_tracks, replace=False)) if n_tracks else np.zeros(0, int)
    t_pix = np.zeros((n_tracks, n_frames, 2))
    t_depth = np.zeros((n_tracks, n_frames))
    t_vis = np.zeros((n_tracks, n_frames), dtype=bool)
    all_gt = []
    for f in range(n_frames):
        obj = owner[track_prim]
        pts = np.einsum("nij,nj->ni", quat_to_matrix(rots[obj, f]), centers[track_prim]) + trans[obj, f]
        vis = _visible(cfg, poses, f, cameras[f], pts, obj)
        uv, z = _safe_project(pts, cameras[f])
        if cfg.tracklet_pixel_noise > 0:
            uv = uv + rng.normal(0.0, cfg.tracklet_pixel_noise, size=uv.shape)
        if cfg.tracklet_depth_noise > 0:
            z = z + rng.normal(0.0, cfg.tracklet_depth_noise, size=z.shape)
        vis &= z > 0
        t_pix[:, f] = np.where(vis[:, None], uv, 0.0)
        t_depth[:, f] = np.where(vis, z, 0.0)
        t_vis[:, f] = vis
        all_gt.append(np.einsum("nij,nj->ni", quat_to_matrix(rots[owner, f]), centers) + trans[owner, f])

    all_gt = np.concatenate(all_gt)
    return SceneBundle(
        config=cfg,
        seed=int(seed),
        frame_times=np.linspace(0.0, 1.0, n_frames),
        cameras=cameras,
        object_names=[obj.name for obj in cfg.objects],
        object_dynamic=dynamic,
        object_rotations=rots,
        object_translations=trans,
        centers=centers,
        covariances=covs,
        opacities=opac,
        colors=colors,
        primitive_object=owner,
        patch_frames=patch_frames,
        patch_depth=p_depth,
        patch_prior=p_prior,
        patch_tokens=p_tokens,
        track_pixels=t_pix,
        track_depths=t_depth,
        track_visible=t_vis,
        track_primitive=track_prim,
        bbox_min=all_gt.min(axis=0),
        bbox_max=all_gt.max(axis=0),
    )


def _safe_project(points, cam: Camera):
    z = cam.to_camera(points)[:, 2]
    front = z > 1e-9
    uv = np.zeros((len(points), 2))
    if np.any(front):
        uv[front], _ = project_points(points[front], cam)
    return uv, np.where(front, z, 0.0)


def _visible(cfg, poses, frame, cam, points, owner) -> np.ndarray:
    """Points in the image whose pixel ray hits nothing in front of them."""
    uv, z = _safe_project(points, cam)
    vis = (z > 1e-9) & cam.in_image(uv)
    if not np.any(vis):
        return vis
    depth, _ = _first_hit(cfg, poses, frame, cam, uv[vis])
    vis[vis] = depth >= z[vis] - _VISIBILITY_TOL * (1.0 + z[vis])
    return vis


def reference_config() -> SceneConfig:
    """Static panel beside a box that translates towards it."""
    return SceneConfig(
        objects=[
            ObjectConfig(
                name="panel",
                shape="plane",
                center=(1.5, 0.0, 3.5),
                size=(1.4, 1.4),
                motion="static",
                primitives=2000,
                color=(0.55, 0.6, 0.5),
            ),
            ObjectConfig(
                name="box",
                shape="box",
                center=(-0.8, 0.0, 3.0),
                size=(1.0, 1.0, 1.0),
                motion="rigid-translation",
                velocity=(0.04, 0.0, 0.0),
                primitives=2500,
                color=(0.8, 0.3, 0.2),
            ),
        ]
    )
