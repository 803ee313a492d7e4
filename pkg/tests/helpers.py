"""Shared builders for the test suite."""

import numpy as np

from motionnodes.deform_graph import NodeSet
from motionnodes.rigid_math import quat_from_axis_angle, quat_mul, quat_to_matrix, random_quaternions
from motionnodes.spline_traj import uniform_keyframes


def random_nodeset(rng, n=10, k=5, motion=0.3, rotate=False):
    """Nodes with random keyframe positions anchored at their t=0 position."""
    times = uniform_keyframes(k)
    start = rng.uniform(-1, 1, size=(n, 3))
    positions = start[:, None, :] + motion * rng.normal(size=(n, k, 3))
    positions[:, 0] = start
    if rotate:
        rotations = random_quaternions(rng, n * k).reshape(n, k, 4)
        rotations[:, 0] = [1.0, 0, 0, 0]
    else:
        rotations = np.tile([1.0, 0, 0, 0], (n, k, 1))
    return NodeSet(start, rng.uniform(0.3, 1.0, n), times, positions, rotations)


def shared_rigid_nodeset(rng, n=8, k=5, spin=1.2):
    """Nodes whose keyframes all carry one rigid motion ``x -> R_k x + T_k``.

    With ``spin=0`` the rotation is a fixed random ``R`` and the shared
    motion holds at every time; otherwise it holds exactly at keyframe
    times. Returns the node set and ``(rotations (K, 4), translations (K, 3))``.
    """
    times = uniform_keyframes(k)
    centers = rng.uniform(-1, 1, size=(n, 3))
    base = random_quaternions(rng, 1)[0]
    axis = rng.normal(size=3)
    rots = np.stack([quat_mul(quat_from_axis_angle(axis, spin * t), base) for t in times])
    trans = np.outer(times, rng.normal(scale=0.5, size=3)) + rng.normal(scale=0.1, size=(k, 3))
    positions = np.einsum("kij,nj->nki", quat_to_matrix(rots), centers) + trans[None]
    rotations = np.repeat(rots[None], n, axis=0)
    return NodeSet(centers, np.full(n, 0.8), times, positions, rotations), (rots, trans)


def central_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` over every entry of ``x``."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
