import json
import logging
import math
import re
import subprocess
import sys

import numpy as np
import pytest

from motionnodes import __version__
from motionnodes.cli import main
from motionnodes.deform_graph import NodeSet
from motionnodes.pipeline import fit_nodes
from motionnodes.scene_harness.io import read_bundle, read_metrics, read_nodes, read_records
from motionnodes.spline_traj import uniform_keyframes
from test_scene_harness import SMALL_SCENE


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_SCENE.format(motion="rigid-translation", velocity="0.02, 0, 0", name="cube"))
    return path


@pytest.fixture(scope="module")
def reference_bundle(tmp_path_factory):
    path = tmp_path_factory.mktemp("ref") / "bundle.jsonl"
    assert main(["gen-scene", "--seed", "3", "-o", str(path)]) == 0
    return path


class TestGenScene:
    def test_byte_identical(self, tmp_path, small_cfg):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["gen-scene", str(small_cfg), "--seed", "1", "-o", str(a)]) == 0
        assert main(["gen-scene", str(small_cfg), "--seed", "1", "-o", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        header = json.loads(a.read_text().splitlines()[0])
        assert header["record"] == "header" and header["format_version"] == "1.0"

    def test_malformed_config(self, tmp_path, small_cfg, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(small_cfg.read_text().replace("fy = 60", "fy = sixty"))
        line = bad.read_text().splitlines().index("fy = sixty") + 1
        assert main(["gen-scene", str(bad), "--seed", "1", "-o", str(tmp_path / "x.jsonl")]) == 2
        assert f"{bad}:{line}:" in capsys.readouterr().err
        assert not (tmp_path / "x.jsonl").exists()

    def test_seed_mandatory(self, tmp_path, small_cfg, capsys):
        assert main(["gen-scene", str(small_cfg), "-o", str(tmp_path / "x.jsonl")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["gen-scene", str(tmp_path / "nope.cfg"), "--seed", "1", "-o", str(tmp_path / "x")]) == 2


class TestInitNodes:
    def test_density_ratio_matches_eval(self, tmp_path, reference_bundle, capsys):
        nodes = tmp_path / "nodes.jsonl"
        metrics = tmp_path / "metrics.json"
        assert main(["init-nodes", str(reference_bundle), "-o", str(nodes)]) == 0
        out = capsys.readouterr().out
        printed = dict(re.findall(r"^(\w+): (\S+)$", out, re.M))
        assert int(printed["nodes"]) <= 100
        assert len(read_nodes(nodes)) == int(printed["nodes"])
        assert main(["eval", str(reference_bundle), str(nodes), "-o", str(metrics)]) == 0
        ratio = read_metrics(metrics)["density_ratio"]
        assert float(printed["density_ratio"]) == pytest.approx(ratio, rel=1e-5)
        assert ratio >= 3.0

    def test_passthrough(self, tmp_path, reference_bundle, capsys):
        nodes = tmp_path / "nodes.jsonl"
        assert main(["init-nodes", str(reference_bundle), "--target-count", "100000", "-o", str(nodes)]) == 0
        printed = dict(re.findall(r"^(\w+): (\S+)$", capsys.readouterr().out, re.M))
        assert printed["iterations"] == "0"
        assert printed["nodes"] == printed["candidates"]

    def test_target_not_reached(self, tmp_path, reference_bundle, caplog):
        nodes = tmp_path / "nodes.jsonl"
        with caplog.at_level(logging.WARNING):
            code = main(
                ["init-nodes", str(reference_bundle), "--target-count", "1", "--max-iterations", "1", "-o", str(nodes)]
            )
        assert code == 3
        assert len(read_nodes(nodes)) > 1
        assert any("anyway" in r.message for r in caplog.records)


class TestFit:
    def test_zero_noise_residual(self, tmp_path, reference_bundle):
        init = tmp_path / "init.jsonl"
        assert main(["init-nodes", str(reference_bundle), "-o", str(init)]) == 0
        bundle = read_bundle(reference_bundle)
        _, report = fit_nodes(bundle, read_nodes(init))
        fitted = report.residual_rms[~np.isnan(report.residual_rms)]
        assert fitted.size > 0 and fitted.max() < 1e-8

    def test_static_scene_constant_splines(self, tmp_path):
        cfg = tmp_path / "static.cfg"
        cfg.write_text(SMALL_SCENE.format(motion="static", velocity="0, 0, 0", name="cube"))
        paths = {k: str(tmp_path / f"{k}.jsonl") for k in ("bundle", "init", "fit")}
        assert main(["gen-scene", str(cfg), "--seed", "2", "-o", paths["bundle"]]) == 0
        assert main(["init-nodes", paths["bundle"], "--target-count", "20", "-o", paths["init"]]) == 0
        assert main(["fit", paths["bundle"], paths["init"], "--keyframes", "5", "-o", paths["fit"]]) == 0
        nodes = read_nodes(paths["fit"])
        assert nodes.positions.shape[1] == 5
        assert np.max(np.abs(nodes.positions - nodes.positions[:, :1])) < 1e-9

    def test_missing_tracklet_keeps_node_static(self, reference_bundle, caplog):
        bundle = read_bundle(reference_bundle)
        nodes = NodeSet.static(bundle.centers[::500], uniform_keyframes(6))
        nodes.anchors[:] = -1
        nodes.anchors[0] = 0
        with caplog.at_level(logging.WARNING):
            fitted, report = fit_nodes(bundle, nodes)
        assert report.static_nodes == list(range(1, len(nodes)))
        assert np.array_equal(fitted.positions[1:], np.repeat(nodes.centers[1:, None], nodes.positions.shape[1], axis=1))
        assert any("static" in r.message for r in caplog.records)


class TestOptimizeAndEval:
    def test_loss_log_finite(self, tmp_path, reference_bundle):
        init, fit, opt, log_path = (str(tmp_path / n) for n in ("i.jsonl", "f.jsonl", "o.jsonl", "log.jsonl"))
        assert main(["init-nodes", str(reference_bundle), "-o", init]) == 0
        assert main(["fit", str(reference_bundle), init, "-o", fit]) == 0
        assert main(["optimize", str(reference_bundle), fit, "--iterations", "5", "-o", opt, "--loss-log", log_path]) == 0
        records = list(read_records(log_path))
        assert records[0]["kind"] == "losslog" and records[0]["format_version"] == "1.0"
        assert [r["iteration"] for r in records[1:]] == [1, 2, 3, 4, 5]
        assert all(math.isfinite(r[k]) for r in records[1:] for k in ("track", "depth", "arap", "total"))

    def test_bad_weights(self, tmp_path, reference_bundle):
        assert main(["optimize", str(reference_bundle), "x", "-o", str(tmp_path / "o"), "--lambda-rgb", "1"]) == 2


class TestRunConfig:
    def test_config_file_and_flag_override(self, tmp_path, small_cfg):
        run_cfg = tmp_path / "run.ini"
        run_cfg.write_text("[run]\nseed = 5\nkeyframes = 4\niterations = 3\ntarget-count = 30\n")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run", str(small_cfg), "--config", str(run_cfg), "--out-dir", str(out_a)]) == 0
        assert read_nodes(out_a / "nodes_opt.jsonl").positions.shape[1] == 4
        assert main(["run", str(small_cfg), "--config", str(run_cfg), "--keyframes", "6", "--out-dir", str(out_b)]) == 0
        assert read_nodes(out_b / "nodes_opt.jsonl").positions.shape[1] == 6

    @pytest.mark.parametrize("body", ["[run]\nseed = five\n", "[run]\nbogus = 1\n", "seed = 1\n", "[run\n"])
    def test_bad_config_file(self, tmp_path, small_cfg, body, capsys):
        run_cfg = tmp_path / "run.ini"
        run_cfg.write_text(body)
        assert main(["gen-scene", str(small_cfg), "--config", str(run_cfg), "-o", str(tmp_path / "x")]) == 2
        assert str(run_cfg) in capsys.readouterr().err

    def test_out_of_range_value(self, tmp_path, small_cfg, capsys):
        run_cfg = tmp_path / "run.ini"
        run_cfg.write_text("[run]\nthreads = 0\n")
        assert main(["gen-scene", str(small_cfg), "--config", str(run_cfg), "-o", str(tmp_path / "x")]) == 2
        assert "threads" in capsys.readouterr().err

    def test_rerun_reproduces_every_file(self, tmp_path, small_cfg):
        args = ["run", str(small_cfg), "--seed", "9", "--iterations", "5", "--target-count", "30"]
        assert main(args + ["--out-dir", str(tmp_path / "one")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "two")]) == 0
        names = sorted(p.name for p in (tmp_path / "one").iterdir())
        assert names == ["bundle.jsonl", "loss_log.jsonl", "metrics.json", "nodes_fit.jsonl", "nodes_init.jsonl", "nodes_opt.jsonl"]
        for name in names:
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


class TestEntryPoint:
    def test_version(self):
        out = subprocess.run([sys.executable, "-m", "motionnodes.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0
        assert __version__ in out.stdout and "format_version 1.x" in out.stdout

    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["run", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--seed", "--threads", "--target-count", "--keyframes", "--iterations", "--step-size", "--lambda-arap"):
            assert flag in text
