import numpy as np
import pytest

from helpers import central_difference, random_nodeset, relative_error, shared_rigid_nodeset
from motionnodes.deform_graph import NodeSet, neighbor_graph
from motionnodes.errors import NonFiniteLoss, SpanMismatch
from motionnodes.optimize import (
    LossWeights,
    OptimData,
    OptimState,
    arap_loss,
    depth_loss,
    loss_terms,
    refine,
    rotation_gradient,
    total_loss,
    track_loss,
)
from motionnodes.rigid_math import quat_from_axis_angle, quat_to_matrix
from motionnodes.scene_harness.camera import Camera, backproject_points, project_points
from motionnodes.spline_traj import eval_position, uniform_keyframes

DEPTH = np.array([0.0, 0.0, 4.0])


def make_cameras(rng, frames):
    cams = []
    for _ in range(frames):
        r = quat_to_matrix(quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.1)))
        cams.append(Camera(rng.uniform(80, 150), rng.uniform(80, 150), 64.0, 48.0, 128, 96, r, rng.normal(scale=0.1, size=3)))
    return cams


def observe(nodes, cams, frame_times, edges=None):
    """Data whose tracklet ``i`` is node ``i`` seen exactly by every camera."""
    n, f = len(nodes), len(cams)
    pixels = np.zeros((n, f, 2))
    depths = np.zeros((n, f))
    for j, t in enumerate(frame_times):
        pixels[:, j], depths[:, j] = project_points(nodes.positions_at(t), cams[j])
    if edges is None:
        edges = neighbor_graph(nodes.centers, 3)
    return OptimData.build(frame_times, cams, pixels, depths, np.ones((n, f), bool), np.arange(n), edges)


def shift(nodes, offset):
    nodes = nodes.copy()
    nodes.positions = nodes.positions + offset
    nodes.centers = nodes.centers + offset
    return nodes


def random_problem(rng, n=5, k=4, frames=7):
    truth = shift(random_nodeset(rng, n=n, k=k, motion=0.2), DEPTH)
    data = observe(truth, make_cameras(rng, frames), np.linspace(0, 1, frames))
    moved = truth.copy()
    moved.positions = moved.positions + rng.normal(scale=0.05, size=moved.positions.shape)
    return OptimState(moved), data


def rigid_problem(rng, n=6, frames=9):
    nodes, _ = shared_rigid_nodeset(rng, n=n, spin=0.0)
    nodes = shift(nodes, DEPTH)
    return OptimState(nodes), observe(nodes, make_cameras(rng, frames), np.linspace(0, 1, frames))


def single_node(position=(0.0, 0.0, 1.0), k=4):
    return NodeSet.static(np.array([position]), uniform_keyframes(k))


class TestTerms:
    def test_consistent_state_zero(self):
        state, data = rigid_problem(np.random.default_rng(0))
        assert track_loss(state, data)[0] < 1e-9
        assert depth_loss(state, data)[0] < 1e-9
        assert arap_loss(state, data)[0] < 1e-9

    def test_lateral_shift_one_pixel(self):
        cam = Camera.identity(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
        nodes = single_node()
        data = observe(nodes, [cam] * 5, np.linspace(0, 1, 5), edges=[])
        moved = shift(nodes, [0.01, 0.0, 0.0])
        loss, _ = track_loss(OptimState(moved), data)
        assert loss / 5 == pytest.approx(1.0, rel=1e-9)

    def test_axial_shift_depth(self):
        cam = Camera.identity(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
        nodes = single_node()
        data = observe(nodes, [cam] * 5, np.linspace(0, 1, 5), edges=[])
        loss, _ = depth_loss(OptimState(shift(nodes, [0.0, 0.0, 0.1])), data)
        assert loss / 5 == pytest.approx(0.01, rel=1e-9)

    @pytest.mark.parametrize("term", [track_loss, depth_loss, arap_loss])
    def test_gradient_matches_fd(self, term):
        rng = np.random.default_rng(1)
        for _ in range(50):
            state, data = random_problem(rng)
            _, g = term(state, data)

            def f(p):
                trial = state.copy()
                trial.nodes.positions = p
                return term(trial, data)[0]

            fd = central_difference(f, state.nodes.positions.copy())
            assert relative_error(g, fd) < 1e-4

    def test_span_mismatch(self):
        rng = np.random.default_rng(2)
        state, data = random_problem(rng)
        short = state.nodes.copy()
        short.keyframe_times = short.keyframe_times * 0.5
        with pytest.raises(SpanMismatch):
            track_loss(OptimState(short), data)


class TestTotal:
    def test_all_weights_zero(self):
        state, data = random_problem(np.random.default_rng(3))
        value, grad = total_loss(state, data, LossWeights(depth=0, track=0, arap=0))
        assert value == 0.0 and not np.any(grad)

    def test_track_only(self):
        state, data = random_problem(np.random.default_rng(4))
        value, grad = total_loss(state, data, LossWeights(depth=0, track=1, arap=0))
        t_value, t_grad = track_loss(state, data)
        assert value == t_value and np.array_equal(grad, t_grad)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            state, data = random_problem(rng)
            w = LossWeights(depth=rng.uniform(0, 2), track=rng.uniform(0, 2), arap=rng.uniform(0, 2))
            value, grad, terms = loss_terms(state, data, w)
            parts = [(w.track, track_loss), (w.depth, depth_loss), (w.arap, arap_loss)]
            expect = sum(lam * fn(state, data)[0] for lam, fn in parts)
            expect_grad = sum(lam * fn(state, data)[1] for lam, fn in parts)
            assert abs(value - expect) <= 1e-12 * max(1.0, abs(expect))
            assert np.max(np.abs(grad - expect_grad)) <= 1e-12 * max(1.0, np.max(np.abs(expect_grad)))
            assert terms["rgb"] == terms["mask"] == 0.0

    def test_out_of_scope_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(rgb=0.5)
        with pytest.raises(ValueError):
            LossWeights(mask=1.0)
        with pytest.raises(ValueError):
            LossWeights(arap=-1.0)


class TestRefine:
    def test_stationary_at_optimum(self):
        state, data = rigid_problem(np.random.default_rng(6))
        w = LossWeights()
        before, _ = total_loss(state, data, w)
        out = refine(state, data, w, iterations=20, step_size=1e-4)
        after, _ = total_loss(out, data, w)
        assert abs(after - before) < 1e-12
        assert np.max(np.abs(out.nodes.positions - state.nodes.positions)) < 1e-9

    def test_noisy_fit_decreases(self):
        rng = np.random.default_rng(7)
        truth, data = rigid_problem(rng, n=8)
        noisy = truth.copy()
        noisy.nodes.positions = noisy.nodes.positions + rng.normal(scale=0.01, size=noisy.nodes.positions.shape)
        w = LossWeights()
        before, _ = total_loss(noisy, data, w)
        out = refine(noisy, data, w, iterations=100, step_size=1e-4)
        totals = [before] + [h["total"] for h in out.history]
        assert len(out.history) == 100 and out.iteration == 100
        assert all(b <= a for a, b in zip(totals, totals[1:]))
        assert totals[-1] < before
        for key in ("iteration", "track", "depth", "arap", "rgb", "mask", "total", "step"):
            assert key in out.history[0]

    def test_single_node_converges_to_tracklet(self):
        rng = np.random.default_rng(8)
        cams = make_cameras(rng, 10)
        times = np.linspace(0, 1, 10)
        target = single_node((0.1, -0.2, 3.0))
        target.positions[0] = target.positions[0] + np.outer(target.keyframe_times, [0.3, 0.1, 0.2])
        data = observe(target, cams, times, edges=[])
        start = OptimState(single_node((0.0, 0.0, 3.2)))
        out = refine(start, data, LossWeights(arap=0.0), iterations=1000, step_size=1e-4)
        cam_pts = [backproject_points(data.obs_pixel[j : j + 1], data.obs_depth[j : j + 1], cams[j])[0] for j in range(10)]
        fitted = eval_position(out.nodes.node(0).trajectory, times)
        assert np.max(np.linalg.norm(fitted - np.array(cam_pts), axis=1)) < 1e-4

    def test_rotations_stay_unit(self):
        rng = np.random.default_rng(9)
        nodes = random_nodeset(rng, n=5, rotate=True)
        state = OptimState(shift(nodes, DEPTH))
        data = observe(state.nodes, make_cameras(rng, 6), np.linspace(0, 1, 6))
        state.nodes.positions += rng.normal(scale=0.02, size=state.nodes.positions.shape)
        out = refine(state, data, LossWeights(), iterations=20, step_size=1e-4, rotation_interval=5)
        assert np.max(np.abs(np.linalg.norm(out.nodes.rotations, axis=-1) - 1)) < 1e-9
        # no in-scope term reads rotations, so their chart gradient is exactly zero
        assert not np.any(rotation_gradient(out, data, LossWeights()))

    def test_never_increases(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            state, data = random_problem(rng)
            w = LossWeights()
            before, _ = total_loss(state, data, w)
            out = refine(state, data, w, iterations=10, step_size=10.0)
            assert total_loss(out, data, w)[0] <= before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self):
        state, data = random_problem(np.random.default_rng(11))
        data.obs_depth[0] = np.inf
        with pytest.raises(NonFiniteLoss) as info:
            refine(state, data, LossWeights(), iterations=5, step_size=1e-4)
        assert info.value.state is not None

    def test_rejects_bad_step(self):
        state, data = random_problem(np.random.default_rng(12))
        with pytest.raises(ValueError):
            refine(state, data, LossWeights(), iterations=1, step_size=0.0)
