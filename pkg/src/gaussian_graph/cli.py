"""Command-line entry point: ``gaussian-graph <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(gradient check mismatch or a diverging fit).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import MODES, ConfigError, PipelineConfig
from .fileio import write_view_bundle
from .ggn import forward
from .graph import build_graph
from .optim import FitConfig, FitDivergence, fit_heads, gradcheck
from .pipeline import (TIMING_FIELDS, PipelineError, benchmark, count_arithmetic, init_model, lift_inputs,
                       load_model, make_samples, mode_graphs, network_config, pooling_config, run_pipeline,
                       save_model, summarize, write_outputs, write_table)
from .plotting import plot_loss_curve, plot_metric_vs_views
from .pooling import no_pooling, pool_graph
from .suite import SUITE, load_scene
from .synth import SceneError, raytrace, scene_to_dict

log = logging.getLogger("gaussian_graph")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class _ConfigFailure(Exception):
    pass


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dump(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.resolution is not None:
        over["width"] = over["height"] = args.resolution
    if over:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **over})
    return cfg


def _scene(name):
    try:
        return load_scene(name)
    except (OSError, SceneError, KeyError, ValueError) as e:
        raise _ConfigFailure(f"cannot load scene {name!r}: {e}") from None


def _model(args, cfg):
    """Weights from --weights when given (their stored mode wins), else seeded init."""
    if args.weights:
        model, mode, fitted_hash = load_model(args.weights)
        if fitted_hash != cfg.hash():
            log.warning("weights were fitted under config %s, running with %s", fitted_hash, cfg.hash())
        if args.mode and args.mode != mode:
            log.warning("--mode %s overrides the stored mode %s", args.mode, mode)
            mode = args.mode
        return model, mode
    mode = args.mode or "ggn"
    return init_model(cfg, mode), mode


def _views(args, cfg):
    scene, rig = _scene(args.scene)
    cams = rig.cameras(args.views, cfg.width, cfg.height)
    targets = rig.targets(args.views, cfg.width, cfg.height, cfg.max_targets)
    return scene, rig, cams, targets


def _layer_features(args, cfg):
    scene, _, cams, _ = _views(args, cfg)
    model, mode = _model(args, cfg)
    views = [raytrace(scene, c) for c in cams]
    nodes, feats = lift_inputs(views, cfg)
    layer_graph, pgraph = mode_graphs(nodes, cfg, mode)
    if model.layers:
        feats = forward(layer_graph, feats, model.layers, network_config(cfg))
    return mode, nodes, layer_graph, pgraph, feats


# -- commands ------------------------------------------------------------------------

def cmd_generate(args, cfg):
    scene, _, cams, targets = _views(args, cfg)
    out = {"config_hash": cfg.hash(), "inputs": [], "targets": []}
    for k, cam in enumerate(cams):
        out["inputs"].append(write_view_bundle(os.path.join(args.out_dir, "views"), k, raytrace(scene, cam)))
    for k, cam in enumerate(targets):
        out["targets"].append(write_view_bundle(os.path.join(args.out_dir, "targets"), k, raytrace(scene, cam)))
    _dump(scene_to_dict(scene), os.path.join(args.out_dir, "scene.json"))
    _dump(out, os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote {len(cams)} input and {len(targets)} target views to {args.out_dir}")


def cmd_build_graph(args, cfg):
    scene, _, cams, _ = _views(args, cfg)
    nodes, _ = lift_inputs([raytrace(scene, c) for c in cams], cfg)
    graph = build_graph(nodes, cfg.top_n, cfg.adjacency_mode)
    summary = {"config_hash": cfg.hash(), **graph.summary()}
    _dump(summary, os.path.join(args.out_dir, "graph.json"))
    print(f"{graph.num_nodes} nodes, {len(graph.edges)} retained edges")


def cmd_forward(args, cfg):
    mode, nodes, graph, _, feats = _layer_features(args, cfg)
    stacked = np.concatenate(feats)
    np.save(os.path.join(args.out_dir, "features.npy"), stacked)
    stats = {
        "config_hash": cfg.hash(), "mode": mode, "layers": MODES[mode][0],
        "nodes": [{"count": len(f), "mean": float(f.mean()), "std": float(f.std()),
                   "mean_norm": float(np.linalg.norm(f, axis=1).mean())} for f in feats],
        "edges": [list(e) for e in graph.edges],
    }
    _dump(stats, os.path.join(args.out_dir, "forward.json"))
    print(f"{len(stacked)} feature vectors of dim {stacked.shape[1]}")


def cmd_pool(args, cfg):
    mode, nodes, layer_graph, pgraph, feats = _layer_features(args, cfg)
    if pgraph is not None:
        pooled = pool_graph(pgraph, feats, pooling_config(cfg))
    else:
        pooled = no_pooling(layer_graph, feats)
    lifted = sum(len(n) for n in nodes)
    out = {"config_hash": cfg.hash(), "mode": mode, "lifted": lifted, **pooled.stats()}
    _dump(out, os.path.join(args.out_dir, "pool.json"))
    print(f"{lifted} lifted -> {len(pooled)} pooled Gaussians")


def _run(args, cfg):
    scene, _, cams, targets = _views(args, cfg)
    model, mode = _model(args, cfg)
    return run_pipeline(scene, cams, targets, cfg, mode, model, jobs=args.jobs), mode


def cmd_render(args, cfg):
    res, mode = _run(args, cfg)
    write_outputs(res, cfg, args.out_dir)
    print(f"{mode}: {res.report.gaussian_count} Gaussians, mean PSNR {res.report.mean_psnr:.2f} dB")


def cmd_evaluate(args, cfg):
    res, mode = _run(args, cfg)
    rep = res.report
    _dump({"config_hash": cfg.hash(), "mode": mode, **rep.to_dict()}, os.path.join(args.out_dir, "evaluate.json"))
    with open(os.path.join(args.out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["target", "psnr", "ssim"])
        for k, (p, s) in enumerate(zip(rep.psnr, rep.ssim)):
            w.writerow([k, f"{p:.4f}", f"{s:.4f}"])
    print(f"PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f}  "
          f"{rep.gaussian_count} Gaussians  {rep.render_ms:.1f} ms/frame")


def _suite(names):
    return [(name, *_scene(name)) for name in names]


def cmd_benchmark(args, cfg):
    over = {}
    if args.view_counts:
        over["view_counts"] = args.view_counts
    if args.modes:
        over["modes"] = args.modes
    if over:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **over})
    suite = _suite(args.scenes or SUITE)
    models = {}
    for path in args.weights_for or []:
        model, mode, _ = load_model(path)
        models[mode] = model
    rows, models = benchmark(cfg, suite, models, jobs=args.jobs, fit=not args.no_fit)
    for mode, model in models.items():
        save_model(os.path.join(args.out_dir, f"weights_{mode}.ggnw"), model, cfg, mode)
    summary = summarize(rows)
    write_table(rows, os.path.join(args.out_dir, "table.csv"))
    write_table(summary, os.path.join(args.out_dir, "summary.csv"))
    write_table(rows, os.path.join(args.out_dir, "timing.csv"), TIMING_FIELDS)
    counts = count_arithmetic(cfg.view_counts, cfg.height, cfg.width)
    write_table(counts, os.path.join(args.out_dir, "counts.csv"), ["views", "per_pixel_1", "per_pixel_3"])
    plot_metric_vs_views(summary, "psnr", "held-out PSNR (dB)", os.path.join(args.out_dir, "psnr_vs_views.png"))
    plot_metric_vs_views(summary, "gaussians_k", "Gaussians (K)",
                         os.path.join(args.out_dir, "gaussians_vs_views.png"))
    plot_metric_vs_views(summary, "fps", "render FPS", os.path.join(args.out_dir, "fps_vs_views.png"))
    for r in summary:
        print(f"{r['views']:>3} views  {r['method']:<15} PSNR {r['psnr']:6.2f}  SSIM {r['ssim']:.4f}  "
              f"{r['gaussians_k']:9.1f} K  {r['fps']:7.2f} FPS")


def cmd_fit(args, cfg):
    over = {}
    if args.steps is not None:
        over["fit_steps"] = args.steps
    if args.lr is not None:
        over["fit_lr"] = args.lr
    if over:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **over})
    mode = args.mode or "ggn"
    suite = _suite(args.scenes or SUITE)
    samples = make_samples(cfg, mode, [(s, r) for _, s, r in suite])
    fc = FitConfig(lr=cfg.fit_lr, steps=cfg.fit_steps, seed=cfg.seed)
    result = fit_heads(samples, init_model(cfg, mode), fc)
    save_model(os.path.join(args.out_dir, "weights.ggnw"), result.model, cfg, mode)
    with open(os.path.join(args.out_dir, "loss.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss", "color_mse"])
        for k, (a, b) in enumerate(zip(result.losses, result.color_mse), start=1):
            w.writerow([k, repr(a), repr(b)])
    if result.losses:
        plot_loss_curve(result.losses, result.color_mse, os.path.join(args.out_dir, "loss.png"))
    c0 = result.color_mse[0] if result.color_mse else float("nan")
    c1 = result.color_mse[-1] if result.color_mse else float("nan")
    _dump({"config_hash": cfg.hash(), "mode": mode, "steps": cfg.fit_steps, "lr": cfg.fit_lr,
           "initial_color_mse": c0, "final_color_mse": c1,
           "ratio": c1 / c0 if c0 else float("nan")}, os.path.join(args.out_dir, "fit.json"))
    print(f"{mode}: color MSE {c0:.5f} -> {c1:.5f} over {cfg.fit_steps} steps")


GRADCHECK_RUNS = {
    "heads": [("heads", True)],
    "layer": [("layer", False), ("layer", True)],
    "full-stack": [("full-stack", False), ("full-stack", True)],
}


def cmd_gradcheck(args, cfg):
    runs = [r for k in (GRADCHECK_RUNS if args.component == "all" else [args.component])
            for r in GRADCHECK_RUNS[k]]
    reports = []
    for component, edges in runs:
        rep = gradcheck(component, cfg.seed, args.activation, edges, cfg.aggregation, tol=args.tol)
        reports.append(rep)
        status = "ok" if rep.passed else "FAIL"
        print(f"{rep.component:<28} max rel err {rep.max_rel_error:.2e}  ({rep.checked} entries)  {status}")
    ok = all(r.passed for r in reports)
    _dump({"config_hash": cfg.hash(), "passed": ok, "reports": [r.to_dict() for r in reports]},
          os.path.join(args.out_dir, "gradcheck.json"))
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "build-graph": cmd_build_graph,
    "forward": cmd_forward,
    "pool": cmd_pool,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "fit": cmd_fit,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="pipeline config JSON")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out-dir", default="out", help="output directory (default: out)")
    g.add_argument("--jobs", type=int, default=1, help="worker count for rendering / benchmark rows")
    g.add_argument("--resolution", type=int, help="square resolution override")
    g.add_argument("-v", "--verbose", action="store_true")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene", default="room", help=f"built-in scene {SUITE} or a scene JSON path")
    scene.add_argument("--views", type=int, default=4, help="number of input views (default 4)")
    scene.add_argument("--mode", choices=sorted(MODES), help="pipeline mode (default ggn)")
    scene.add_argument("--weights", help="weight file written by `fit` or `benchmark`")

    p = argparse.ArgumentParser(prog="gaussian-graph", description="Gaussian graph multi-view splatting pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "ray-trace input and target views of a scene",
        "build-graph": "lift views and write the graph summary",
        "forward": "run the graph layers and dump features",
        "pool": "pool Gaussians and write merge statistics",
        "render": "full pipeline; writes splats and target renders",
        "evaluate": "full pipeline; writes image metrics",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common, scene], help=text)

    b = sub.add_parser("benchmark", parents=[common], help="comparison table over the standard suite")
    b.add_argument("--scenes", nargs="+", help="scene names or paths (default: standard suite)")
    b.add_argument("--view-counts", nargs="+", type=int)
    b.add_argument("--modes", nargs="+", choices=sorted(MODES))
    b.add_argument("--no-fit", action="store_true", help="use seeded weights instead of fitting")
    b.add_argument("--weights-for", nargs="+", help="pre-fitted weight files (one per mode)")

    f = sub.add_parser("fit", parents=[common], help="fit layers and heads by parameter regression")
    f.add_argument("--mode", choices=sorted(MODES))
    f.add_argument("--scenes", nargs="+", help="scene names or paths (default: standard suite)")
    f.add_argument("--steps", type=int)
    f.add_argument("--lr", type=float)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    gc.add_argument("--component", choices=["all", *GRADCHECK_RUNS], default="all")
    gc.add_argument("--activation", choices=["relu", "gelu", "identity"], default="gelu")
    gc.add_argument("--tol", type=float, default=1e-5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _config(args)
        if getattr(args, "views", 1) < 1:
            raise ConfigError("--views must be >= 1")
        os.makedirs(args.out_dir, exist_ok=True)
        code = COMMANDS[args.command](args, cfg)
        return EXIT_OK if code is None else code
    except (ConfigError, _ConfigFailure) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FitDivergence as e:
        print(f"numerical failure: fit diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PipelineError as e:
        if isinstance(e.cause, (FloatingPointError, FitDivergence)):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e.cause, (ConfigError, _ConfigFailure)):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
