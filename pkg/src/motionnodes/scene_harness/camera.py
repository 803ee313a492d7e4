"""Pinhole camera with world-to-camera extrinsics ``x_c = R x + T``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import BehindCamera, NonPositiveDepth

MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,) world-to-camera

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be a proper rotation")

    @classmethod
    def identity(cls, fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1) -> "Camera":
        return cls(fx, fy, cx, cy, width, height, np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def pixel_rays(self, pixels) -> np.ndarray:
        """World-space ray directions whose camera-space z component is 1."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        local = np.stack(
            [(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy, np.ones(len(pixels))],
            axis=1,
        )
        return local @ self.rotation

    def in_image(self, pixels) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return (
            (pixels[:, 0] >= 0.0)
            & (pixels[:, 0] <= self.width)
            & (pixels[:, 1] >= 0.0)
            & (pixels[:, 1] <= self.height)
        )


def backproject_points(pixels, depths, cam: Camera) -> np.ndarray:
    """Vectorized back-projection of ``(n, 2)`` pixels at ``(n,)`` depths."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    depths = np.asarray(depths, dtype=float).reshape(-1)
    if np.any(depths <= 0.0):
        raise NonPositiveDepth("back-projection needs positive depth")
    local = np.stack(
        [
            depths * (pixels[:, 0] - cam.cx) / cam.fx,
            depths * (pixels[:, 1] - cam.cy) / cam.fy,
            depths,
        ],
        axis=1,
    )
    # R^T (x_c - T), written as row-vector products
    return (local - cam.translation) @ cam.rotation


def backproject(u, depth: float, cam: Camera) -> np.ndarray:
    return backproject_points(np.asarray(u, dtype=float)[None], [depth], cam)[0]


def project_points(points, cam: Camera):
    """Project ``(n, 3)`` world points; returns ``(pixels (n, 2), depths (n,))``."""
    xc = cam.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
    z = xc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point at or behind the camera plane")
    uv = np.stack([cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy], axis=1)
    return uv, z


def project(x, cam: Camera):
    uv, z = project_points(np.asarray(x, dtype=float)[None], cam)
    return uv[0], float(z[0])


def projection_jacobian(points, cam: Camera):
    """Pixels, depths and ``d pixel / d world`` ``(n, 2, 3)`` for each point."""
    xc = cam.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
    z = xc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point at or behind the camera plane")
    inv_z = 1.0 / z
    uv = np.stack([cam.fx * xc[:, 0] * inv_z + cam.cx, cam.fy * xc[:, 1] * inv_z + cam.cy], axis=1)
    jc = np.zeros((xc.shape[0], 2, 3))
    jc[:, 0, 0] = cam.fx * inv_z
    jc[:, 0, 2] = -cam.fx * xc[:, 0] * inv_z**2
    jc[:, 1, 1] = cam.fy * inv_z
    jc[:, 1, 2] = -cam.fy * xc[:, 1] * inv_z**2
    return uv, z, jc @ cam.rotation
