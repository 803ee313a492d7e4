"""The eleven acceptance criteria, one test each.

Every test prints one ``criterion NN: PASS|FAIL`` line with its measured
numbers and runtime; the lines are also collected into a summary section at
the end of the pytest run.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import central_difference, random_nodeset, relative_error, shared_rigid_nodeset
from motionnodes.cli import main
from motionnodes.deform_graph import Primitive, arap_energy, build_binding, deform_primitive, neighbor_graph
from motionnodes.node_init import CandidateNode, CompressionParams, adaptive_ratio, compress, dyn_score
from motionnodes.optimize import depth_loss, track_loss
from motionnodes.pipeline import balanced_subset, candidates_from_bundle
from motionnodes.rigid_math import SE3Pose, dq_to_se3, dqb_blend, quat_angle, quat_to_matrix, random_quaternions, se3_to_dq
from motionnodes.scene_harness.compositing import composite_alpha
from motionnodes.scene_harness.generate import gen_scene, reference_config
from motionnodes.scene_harness.io import read_metrics
from motionnodes.scene_harness.metrics import density_ratio
from motionnodes.spline_traj import (
    SplineTrajectory,
    eval_position,
    fit_spline,
    hermite_basis,
    uniform_keyframes,
)
from test_optimize import random_problem


def report(number, title, ok, detail, elapsed):
    line = f"criterion {number:02d}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}; {elapsed:.2f} s]"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def random_spline(rng, k=6):
    times = np.sort(np.r_[0.0, rng.uniform(0.05, 0.95, k - 2), 1.0])
    return SplineTrajectory.from_positions(times, rng.normal(size=(k, 3)))


def test_01_rigidity():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    orth = det = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        w = rng.dirichlet(np.ones(n))
        q = random_quaternions(rng, n)
        t = rng.normal(scale=2.0, size=(n, 3))
        r = quat_to_matrix(dqb_blend([(w[i], se3_to_dq(SE3Pose(q[i], t[i]))) for i in range(n)]).rotation)
        orth = max(orth, float(np.max(np.abs(r @ r.T - np.eye(3)))))
        det = max(det, abs(float(np.linalg.det(r)) - 1.0))
    elapsed = time.perf_counter() - start
    ok = orth < 1e-9 and det <= 1e-9 and elapsed < 5.0
    report(1, "dqb_blend rigidity", ok, f"max |RR^T-I| {orth:.1e}, max |det-1| {det:.1e}", elapsed)


def test_02_se3_dq_round_trip():
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    q = random_quaternions(rng, 10_000)
    t = rng.normal(scale=2.0, size=(10_000, 3))
    pos_err = ang_err = 0.0
    for i in range(10_000):
        back = dq_to_se3(se3_to_dq(SE3Pose(q[i], t[i])))
        pos_err = max(pos_err, float(np.max(np.abs(back.translation - t[i]))))
        ang_err = max(ang_err, quat_angle(back.rotation, q[i]))
    ok = pos_err < 1e-9 and ang_err < 1e-9
    report(2, "SE3 <-> dual quaternion round trip", ok, f"position {pos_err:.1e} m, angle {ang_err:.1e} rad", time.perf_counter() - start)


def test_03_hermite():
    start = time.perf_counter()
    closed = lambda s: (2 * s**3 - 3 * s**2 + 1, s**3 - 2 * s**2 + s, -2 * s**3 + 3 * s**2, s**3 - s**2)
    basis_err = max(abs(a - b) for s in (0.0, 0.5, 1.0) for a, b in zip(hermite_basis(s), closed(s)))

    rng = np.random.default_rng(103)
    h = 1e-6
    c1_err = 0.0
    for _ in range(20):
        times = uniform_keyframes(6) + np.r_[0, rng.uniform(-0.05, 0.05, 4), 0]
        traj = SplineTrajectory.from_positions(times, rng.normal(size=(6, 3)))
        for tk in times[1:-1]:
            # second-order one-sided differences at step h on each side
            left = [eval_position(traj, tk - i * h) for i in range(3)]
            right = [eval_position(traj, tk + i * h) for i in range(3)]
            d_left = (3 * left[0] - 4 * left[1] + left[2]) / (2 * h)
            d_right = (-3 * right[0] + 4 * right[1] - right[2]) / (2 * h)
            c1_err = max(c1_err, float(np.max(np.abs(d_left - d_right))))

    refit = 0.0
    for _ in range(20):
        truth = random_spline(rng)
        ts = np.linspace(0, 1, 50)
        _, res = fit_spline(ts, eval_position(truth, ts), truth.keyframe_times)
        refit = max(refit, res)
    ok = basis_err <= 1e-12 and c1_err < 1e-6 and refit < 1e-8
    detail = f"basis {basis_err:.1e}, C1 jump {c1_err:.1e}, refit residual {refit:.1e}"
    report(3, "Hermite basis, C1 continuity, cubic refit", ok, detail, time.perf_counter() - start)


def test_04_fitting_oracle():
    start = time.perf_counter()
    recover = 0.0
    bound_ok = True
    s = 0.01
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth = random_spline(rng)
        ts = np.linspace(0, 1, 60)
        clean = eval_position(truth, ts)
        fitted, _ = fit_spline(ts, clean, truth.keyframe_times)
        recover = max(recover, float(np.max(np.abs(fitted.positions - truth.positions))))
        _, res = fit_spline(ts, clean + rng.normal(scale=s, size=clean.shape), truth.keyframe_times)
        bound_ok &= res <= (3 * s) ** 2 * ts.size
    ok = recover < 1e-9 and bound_ok
    report(4, "fit_spline oracle", ok, f"keyframe recovery {recover:.1e} m, noise bound over 20 seeds {bound_ok}", time.perf_counter() - start)


def test_05_rigid_consistency():
    rng = np.random.default_rng(105)
    start = time.perf_counter()
    worst = 0.0
    # spin > 0: one rotating SE(3) motion, exact at the 10 keyframe times;
    # spin = 0: fixed rotation with spline translation, exact at any time
    for spin in (1.2, 0.0):
        nodes, (rots, trans) = shared_rigid_nodeset(rng, n=8, k=10, spin=spin)
        times = nodes.keyframe_times if spin else np.sort(rng.uniform(0, 1, 10))
        poses = []
        for j, t in enumerate(times):
            if spin:
                poses.append((quat_to_matrix(rots[j]), trans[j]))
            else:
                poses.append((quat_to_matrix(rots[0]), nodes.positions_at(t)[0] - quat_to_matrix(rots[0]) @ nodes.centers[0]))
        for _ in range(500):
            a = rng.normal(scale=0.1, size=(3, 3))
            prim = Primitive(rng.uniform(-1, 1, 3), a @ a.T + 1e-3 * np.eye(3), 0.5, np.zeros(3))
            row = build_binding(prim.center, nodes).row(0)
            for t, (r, tr) in zip(times, poses):
                out = deform_primitive(prim, nodes, row, t)
                worst = max(worst, float(np.max(np.abs(out.center - (r @ prim.center + tr)))))
                worst = max(worst, float(np.max(np.abs(out.covariance - r @ prim.covariance @ r.T))))
    ok = worst < 1e-8
    report(5, "rigid consistency of deform_primitive", ok, f"1000 primitives x 10 times, max error {worst:.1e}", time.perf_counter() - start)


def test_06_motion_adaptive_allocation():
    bundle = gen_scene(reference_config(), 0)
    start = time.perf_counter()
    cands = balanced_subset(candidates_from_bundle(bundle))
    n_static, n_dyn = int(np.sum(cands.labels == 0)), int(np.sum(cands.labels == 1))
    target = math.ceil(0.1 * len(cands))
    result = compress(cands, CompressionParams(target_count=target))
    elapsed = time.perf_counter() - start
    ratio = density_ratio(bundle, result.nodes)
    conserved = int(result.nodes.merged_counts.sum()) == int(cands.merged_counts.sum())
    ok = n_static == n_dyn and len(result.nodes) <= target and ratio is not None and ratio >= 3.0 and conserved and elapsed < 10.0
    detail = (
        f"{len(cands)} candidates ({n_static} static / {n_dyn} dynamic) -> {len(result.nodes)} nodes, "
        f"density ratio {ratio:.2f}, merged_count conserved {conserved}"
    )
    report(6, "motion-adaptive allocation", ok, detail, elapsed)


def test_07_dynamic_score_and_ratio():
    start = time.perf_counter()
    endpoints = adaptive_ratio(1.0, 0.1, 0.9) == 0.1 and adaptive_ratio(0.0, 0.1, 0.9) == 0.9
    rng = np.random.default_rng(107)
    probes = 0
    for _ in range(100):
        n = int(rng.integers(2, 12))
        tokens = rng.normal(size=(n, 8))
        tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
        nodes = [CandidateNode(np.zeros(3), tokens[i], p) for i, p in enumerate(rng.uniform(0, 0.9, n))]
        pairs = [(i, i + 1, float(rng.uniform(-1, 0.9))) for i in range(0, n - 1, 2)]
        alpha, beta = rng.uniform(0.1, 4, 2)
        base = dyn_score(nodes, pairs, alpha, beta)
        raised = [CandidateNode(c.position, c.token, c.prior + 0.1) for c in nodes]
        probes += dyn_score(raised, pairs, alpha, beta) > base
        probes += dyn_score(nodes, [(i, j, s + 0.1) for i, j, s in pairs], alpha, beta) < base
    ok = endpoints and probes == 200
    report(7, "dyn_score / adaptive_ratio behavior", ok, f"endpoints exact {endpoints}, monotone probes {probes}/200", time.perf_counter() - start)


def test_08_gradient_checks():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(108)
    for name, term in (("track", track_loss), ("depth", depth_loss)):
        errs = []
        for _ in range(50):
            state, data = random_problem(rng)
            _, g = term(state, data)

            def f(p):
                trial = state.copy()
                trial.nodes.positions = p
                return term(trial, data)[0]

            errs.append(relative_error(g, central_difference(f, state.nodes.positions.copy(), h=1e-5)))
        worst[name] = max(errs)
    errs = []
    for _ in range(50):
        nodes = random_nodeset(rng, n=6, k=4)
        graph = neighbor_graph(nodes.centers, 3)
        t_a, t_b = sorted(rng.uniform(0, 1, 2))
        _, g = arap_energy(nodes, graph, t_a, t_b)

        def f(p):
            trial = nodes.copy()
            trial.positions = p
            return arap_energy(trial, graph, t_a, t_b)[0]

        errs.append(relative_error(g, central_difference(f, nodes.positions.copy(), h=1e-5)))
    worst["arap"] = max(errs)
    ok = all(v < 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(8, "analytic gradients vs central differences", ok, detail, time.perf_counter() - start)


def test_09_end_to_end(tmp_path):
    start = time.perf_counter()
    code = main(["run", "--seed", "0", "--threads", "1", "--out-dir", str(tmp_path)])
    elapsed = time.perf_counter() - start
    metrics = read_metrics(tmp_path / "metrics.json")
    rel = metrics["relative_rmse"]
    ok = code == 0 and metrics["primitive_count"] <= 5000 and metrics["frames"] == 24 and rel < 0.01 and elapsed < 120.0
    detail = f"deformed RMSE {metrics['deformed_rmse']:.2e} m = {100 * rel:.2e}% of bbox diagonal, {metrics['node_count']} nodes"
    report(9, "end-to-end pipeline on the reference scene", ok, detail, elapsed)


def test_10_compositing_oracle():
    rng = np.random.default_rng(110)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        entries = [(rng.uniform(0, 1, 3), float(rng.uniform(1e-3, 1 - 1e-3))) for _ in range(n)]
        expected = np.zeros(3)
        for i, (c, a) in enumerate(entries):
            transmittance = 1.0
            for _, a_j in entries[:i]:
                transmittance *= 1.0 - a_j
            expected = expected + c * (a * transmittance)
        mismatches += not np.array_equal(composite_alpha(entries), expected)
    report(10, "alpha compositing oracle", mismatches == 0, f"{mismatches} mismatches in 1000 lists", time.perf_counter() - start)


def test_11_determinism(tmp_path):
    start = time.perf_counter()
    for name in ("one", "two"):
        assert main(["run", "--seed", "11", "--iterations", "20", "--out-dir", str(tmp_path / name)]) == 0
    names = ["bundle.jsonl", "nodes_init.jsonl", "nodes_fit.jsonl", "nodes_opt.jsonl", "loss_log.jsonl", "metrics.json"]
    same = [(tmp_path / "one" / n).read_bytes() == (tmp_path / "two" / n).read_bytes() for n in names]
    detail = ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in zip(names, same))
    report(11, "byte-identical outputs across runs", all(same), detail, time.perf_counter() - start)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
