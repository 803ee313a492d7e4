"""Command-line front end: gen-scene, init-nodes, fit, optimize, eval, run.

Stages talk to each other only through files. Settings come from an
optional ``--config`` INI file (section ``[run]``, keys named like the
long flags with dashes or underscores) and are overridden by flags.

Exit codes: 0 ok, 2 bad configuration or input file, 3 node target not
reached (nodes are still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import FormatError, InvalidConfig, MotionNodesError, TargetNotReached
from .node_init import CompressionParams, compress
from .optimize import LossWeights, OptimState, refine
from .pipeline import anchor_nodes, candidates_from_bundle, fit_nodes, optim_data_from_bundle
from .scene_harness.config import CONFIG_FORMAT_VERSION, load_scene_config
from .scene_harness.generate import BUNDLE_FORMAT_VERSION, gen_scene
from .scene_harness.io import (
    LOSSLOG_FORMAT_VERSION,
    METRICS_FORMAT_VERSION,
    NODES_FORMAT_VERSION,
    read_bundle,
    read_nodes,
    write_bundle,
    write_metrics,
    write_nodes,
    write_records,
)
from .scene_harness.metrics import density_ratio, eval_metrics
from .spline_traj import uniform_keyframes

log = logging.getLogger("motionnodes")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TARGET = 3
EXIT_NUMERIC = 4

REFERENCE_SCENE = Path(__file__).with_name("data") / "reference_scene.cfg"


@dataclass
class RunConfig:
    scene: Optional[str] = None
    bundle: Optional[str] = None
    out_dir: Optional[str] = None
    seed: Optional[int] = None
    compression: CompressionParams = field(default_factory=CompressionParams)
    keyframes: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 100
    step_size: float = 1e-4
    rotation_interval: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.keyframes < 2:
            raise InvalidConfig("keyframes must be at least 2")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be nonnegative")
        if self.step_size <= 0:
            raise InvalidConfig("step_size must be positive")
        if self.threads < 1:
            raise InvalidConfig("threads must be at least 1")
        if self.rotation_interval < 0:
            raise InvalidConfig("rotation_interval must be nonnegative")


_COMPRESSION_KEYS = {
    "v_init": float,
    "delta_v": float,
    "r_min": float,
    "r_max": float,
    "eta": float,
    "alpha_dyn": float,
    "beta_dyn": float,
    "target_count": int,
    "max_iterations": int,
}
_WEIGHT_KEYS = {
    "lambda_rgb": "rgb",
    "lambda_mask": "mask",
    "lambda_depth": "depth",
    "lambda_track": "track",
    "lambda_arap": "arap",
}
_RUN_KEYS = {
    "scene": str,
    "bundle": str,
    "out_dir": str,
    "seed": int,
    "keyframes": int,
    "iterations": int,
    "step_size": float,
    "rotation_interval": int,
    "threads": int,
}


def _read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read run config: {exc}", path=path) from None
    except configparser.Error as exc:
        raise InvalidConfig(str(exc).splitlines()[0], path=path) from None
    if not parser.has_section("run"):
        raise InvalidConfig("missing [run] section", path=path)
    known = set(_COMPRESSION_KEYS) | set(_WEIGHT_KEYS) | set(_RUN_KEYS)
    values = {}
    for key, raw in parser.items("run"):
        name = key.replace("-", "_")
        if name not in known:
            raise InvalidConfig(f"unknown key '{key}'", path=path)
        kind = _COMPRESSION_KEYS.get(name) or _RUN_KEYS.get(name) or float
        try:
            values[name] = kind(raw)
        except ValueError:
            raise InvalidConfig(f"bad value for '{key}': {raw!r}", path=path) from None
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional config file with command-line flags (flags win)."""
    values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in list(_COMPRESSION_KEYS) + list(_WEIGHT_KEYS) + list(_RUN_KEYS):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    try:
        compression = CompressionParams(**{k: values.pop(k) for k in _COMPRESSION_KEYS if k in values})
        weights = LossWeights(**{v: values.pop(k) for k, v in _WEIGHT_KEYS.items() if k in values})
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from None
    return RunConfig(compression=compression, weights=weights, **values)


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise InvalidConfig("a seed is required (--seed or 'seed' in the run config)")
    return cfg.seed


def cmd_gen_scene(args, cfg: RunConfig) -> int:
    scene_path = args.scene_config or cfg.scene or str(REFERENCE_SCENE)
    bundle = gen_scene(load_scene_config(scene_path), _require_seed(cfg))
    write_bundle(args.out, bundle)
    print(f"wrote {args.out}: {len(bundle.centers)} primitives, {bundle.n_frames} frames, "
          f"{len(bundle.track_primitive)} tracklets")
    return EXIT_OK


def cmd_init_nodes(args, cfg: RunConfig) -> int:
    bundle = read_bundle(args.bundle)
    cands = candidates_from_bundle(bundle)
    keyframes = uniform_keyframes(cfg.keyframes)
    status = EXIT_OK
    try:
        result = compress(cands, cfg.compression, keyframes)
    except TargetNotReached as exc:
        log.warning("%s; writing the nodes anyway", exc)
        result = exc.result
        status = EXIT_TARGET
    nodes = anchor_nodes(result.nodes, result.survivors, bundle)
    write_nodes(args.out, nodes, {"stage": "init"})
    ratio = density_ratio(bundle, nodes)
    print(f"candidates: {len(cands)}")
    print(f"iterations: {result.iterations}")
    print(f"nodes: {len(nodes)}")
    print(f"density_ratio: {'undefined' if ratio is None else f'{ratio:.6g}'}")
    return status


def cmd_fit(args, cfg: RunConfig) -> int:
    bundle = read_bundle(args.bundle)
    nodes = read_nodes(args.nodes)
    fitted, report = fit_nodes(bundle, nodes, uniform_keyframes(cfg.keyframes))
    write_nodes(args.out, fitted, {"stage": "fit"})
    fitted_rms = report.residual_rms[~np.isnan(report.residual_rms)]
    worst = f"{fitted_rms.max():.3g}" if fitted_rms.size else "n/a"
    print(f"fitted {len(fitted) - len(report.static_nodes)} of {len(fitted)} nodes; "
          f"max per-node residual rms {worst} m")
    return EXIT_OK


def cmd_optimize(args, cfg: RunConfig) -> int:
    bundle = read_bundle(args.bundle)
    nodes = read_nodes(args.nodes)
    data = optim_data_from_bundle(bundle, nodes)
    entries = []
    state = refine(
        OptimState(nodes),
        data,
        cfg.weights,
        cfg.iterations,
        cfg.step_size,
        rotation_interval=cfg.rotation_interval,
        callback=entries.append,
    )
    write_nodes(args.out, state.nodes, {"stage": "optimize", "iterations": state.iteration})
    if args.loss_log:
        header = {"record": "header", "kind": "losslog", "format_version": LOSSLOG_FORMAT_VERSION,
                  "weights": dataclasses.asdict(cfg.weights)}
        write_records(args.loss_log, [header] + [{"record": "loss", **e} for e in entries])
    final = entries[-1]["total"] if entries else float("nan")
    print(f"{state.iteration} iterations, final loss {final:.6g}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    bundle = read_bundle(args.bundle)
    nodes = read_nodes(args.nodes)
    report = eval_metrics(bundle, nodes, threads=cfg.threads)
    write_metrics(args.out, report)
    print(f"deformed rmse {report['deformed_rmse']:.6g} m "
          f"({100 * report['relative_rmse']:.4g}% of bbox diagonal), {report['node_count']} nodes")
    return EXIT_OK


def cmd_run(args, cfg: RunConfig) -> int:
    """All stages in order, writing every intermediate into ``out_dir``."""
    out = Path(args.out_dir or cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: str(out / name) for k, name in (
        ("bundle", "bundle.jsonl"), ("init", "nodes_init.jsonl"), ("fit", "nodes_fit.jsonl"),
        ("opt", "nodes_opt.jsonl"), ("log", "loss_log.jsonl"), ("metrics", "metrics.json"))}
    ns = argparse.Namespace
    status = cmd_gen_scene(ns(scene_config=args.scene_config, out=paths["bundle"]), cfg)
    init_status = cmd_init_nodes(ns(bundle=paths["bundle"], out=paths["init"]), cfg)
    cmd_fit(ns(bundle=paths["bundle"], nodes=paths["init"], out=paths["fit"]), cfg)
    cmd_optimize(ns(bundle=paths["bundle"], nodes=paths["fit"], out=paths["opt"], loss_log=paths["log"]), cfg)
    cmd_eval(ns(bundle=paths["bundle"], nodes=paths["opt"], out=paths["metrics"]), cfg)
    return init_status or status


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI run config with a [run] section; flags override it")
    p.add_argument("--seed", type=int, help="random seed (mandatory for scene generation)")
    p.add_argument("--threads", type=int, help="worker threads for evaluation (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_compression(p: argparse.ArgumentParser):
    g = p.add_argument_group("compression")
    g.add_argument("--target-count", dest="target_count", type=int, help="stop once at most this many nodes remain (default 100)")
    g.add_argument("--max-iterations", dest="max_iterations", type=int, help="voxel growth rounds (default 32)")
    g.add_argument("--v-init", dest="v_init", type=float, help="initial voxel size in meters (default 1%% of candidate bbox diagonal)")
    g.add_argument("--delta-v", dest="delta_v", type=float, help="voxel growth per round in meters (default as --v-init)")
    g.add_argument("--r-min", dest="r_min", type=float, help="merge fraction for fully dynamic clusters (default 0.1)")
    g.add_argument("--r-max", dest="r_max", type=float, help="merge fraction for fully static clusters (default 0.9)")
    g.add_argument("--eta", type=float, help="prior penalty in the joint similarity (default 0.5)")
    g.add_argument("--alpha-dyn", dest="alpha_dyn", type=float, help="prior gain of the dynamic score (default 2)")
    g.add_argument("--beta-dyn", dest="beta_dyn", type=float, help="similarity gain of the dynamic score (default 2)")


def _add_keyframes(p: argparse.ArgumentParser):
    p.add_argument("--keyframes", type=int, help="spline keyframe count K, uniform in time (default 8)")


def _add_optim(p: argparse.ArgumentParser):
    g = p.add_argument_group("refinement")
    g.add_argument("--iterations", type=int, help="descent iterations (default 100)")
    g.add_argument("--step-size", dest="step_size", type=float, help="initial step size (default 1e-4)")
    g.add_argument("--rotation-interval", dest="rotation_interval", type=int,
                   help="refine rotations every N iterations, 0 disables (default 10)")
    for name, default in (("track", 1.0), ("depth", 0.1), ("arap", 0.1), ("rgb", 0.0), ("mask", 0.0)):
        note = "must be 0" if name in ("rgb", "mask") else f"default {default:g}"
        g.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float, help=f"weight of the {name} term ({note})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionnodes", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"motionnodes {__version__} (reads format_version 1.x: scene config {CONFIG_FORMAT_VERSION}, "
            f"bundle {BUNDLE_FORMAT_VERSION}, nodes {NODES_FORMAT_VERSION}, metrics {METRICS_FORMAT_VERSION}, "
            f"loss log {LOSSLOG_FORMAT_VERSION})"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene bundle")
    p.add_argument("scene_config", nargs="?", help="scene .cfg file (default: bundled reference scene)")
    p.add_argument("-o", "--out", required=True, help="bundle output path")
    _add_common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("init-nodes", help="candidate nodes from patches, then motion-adaptive compression")
    p.add_argument("bundle")
    p.add_argument("-o", "--out", required=True, help="node file output path")
    _add_common(p)
    _add_compression(p)
    _add_keyframes(p)
    p.set_defaults(func=cmd_init_nodes)

    p = sub.add_parser("fit", help="fit node splines to their back-projected tracklets")
    p.add_argument("bundle")
    p.add_argument("nodes")
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    _add_keyframes(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimize", help="refine keyframes by gradient descent")
    p.add_argument("bundle")
    p.add_argument("nodes")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--loss-log", dest="loss_log", help="write per-iteration losses as JSONL here")
    _add_common(p)
    _add_optim(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="compare nodes against the bundle ground truth")
    p.add_argument("bundle")
    p.add_argument("nodes")
    p.add_argument("-o", "--out", required=True, help="metrics.json output path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="every stage in order into one directory")
    p.add_argument("scene_config", nargs="?", help="scene .cfg file (default: bundled reference scene)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default ./run)")
    _add_common(p)
    _add_compression(p)
    _add_keyframes(p)
    _add_optim(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    start = time.perf_counter()
    try:
        cfg = build_run_config(args)
        status = args.func(args, cfg)
    except (InvalidConfig, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MotionNodesError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
    return status


if __name__ == "__main__":
    sys.exit(main())
