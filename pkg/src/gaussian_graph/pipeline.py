"""End-to-end orchestration and the benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import MODES, PipelineConfig
from .fileio import write_ppm
from .gaussians import SceneGaussians, lift_view, write_sidecar, write_splats
from .ggn import NetworkConfig, forward, init_weights, layers_from_arrays, layers_to_arrays, load_weights, save_weights
from .graph import build_graph
from .heads import HeadWeights, init_heads, predict_params
from .metrics import EvalReport, StageTimer, psnr, ssim, time_frames, union_count
from .optim import FitConfig, Model, Sample, fit_heads
from .pooling import PoolingConfig, no_pooling, pool_graph
from .render import render
from .synth import encode_features, oracle_depth, raytrace

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(timer: StageTimer, name: str):
    try:
        with timer(name):
            yield
    except PipelineError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with stage context
        raise PipelineError(name, e) from e


def network_config(config: PipelineConfig) -> NetworkConfig:
    return NetworkConfig(num_layers=config.num_layers, feat_dim=config.feat_dim,
                         adjacency_mode=config.adjacency_mode, aggregation=config.aggregation,
                         activation=config.activation, bias=config.bias, seed=config.seed)


def pooling_config(config: PipelineConfig) -> PoolingConfig:
    return PoolingConfig(lam_mode=config.lam_mode, kappa=config.kappa, lam=config.lam,
                         traversal=config.traversal, seed=config.seed, tau=config.tau,
                         similarity=config.similarity)


def init_model(config: PipelineConfig, mode: str = "ggn") -> Model:
    kind, _ = MODES[mode]
    layers = [] if kind == "none" else init_weights(network_config(config))
    return Model(layers, init_heads(config.feat_dim, config.seed, config.activation), config.aggregation)


def lift_inputs(views, config: PipelineConfig):
    """Oracle depth + deterministic features -> one lifted node per view."""
    nodes, feats = [], []
    for k, view in enumerate(views):
        depth = oracle_depth(view, config.noise_sigma, config.seed + k, config.far_depth)
        f = encode_features(view, config.feat_dim)
        nodes.append(lift_view(view.camera, depth, f, k))
        feats.append(f)
    return nodes, feats


def mode_graphs(nodes, config: PipelineConfig, mode: str):
    """(graph used by the layers, graph used by pooling or None)."""
    kind, pooling = MODES[mode]
    full = None
    if kind == "graph" or pooling:
        full = build_graph(nodes, config.top_n, config.adjacency_mode, build_operators=kind == "graph")
    if kind == "graph":
        layer_graph = full
    else:
        layer_graph = build_graph(nodes, 0, config.adjacency_mode, build_operators=False)
    return layer_graph, (full if pooling else None)


@dataclass
class PipelineResult:
    splats: SceneGaussians
    report: EvalReport
    pooled: object
    graph: object
    nodes: list
    renders: list = field(default_factory=list)
    ground_truth: list = field(default_factory=list)
    fallback_count: int = 0


def run_pipeline(scene, cameras, targets, config: PipelineConfig, mode: str = "ggn",
                 model: Optional[Model] = None, out_dir=None, background=None, jobs: int = 1,
                 measure_render: bool = True) -> PipelineResult:
    """synth -> lift -> graph -> layers -> pool -> heads -> render -> metrics."""
    if not cameras:
        raise PipelineError("synth", "need at least one input view")
    kind, pooling = MODES[mode]
    model = model or init_model(config, mode)
    timer = StageTimer()
    with _stage(timer, "synth"):
        views = [raytrace(scene, c) for c in cameras]
    with _stage(timer, "lift"):
        nodes, feats = lift_inputs(views, config)
    with _stage(timer, "graph"):
        layer_graph, pool_graph_ = mode_graphs(nodes, config, mode)
    with _stage(timer, "forward"):
        if model.layers:
            feats = forward(layer_graph, feats, model.layers, network_config(config))
    with _stage(timer, "pool"):
        if pooling:
            pooled = pool_graph(pool_graph_, feats, pooling_config(config))
        else:
            pooled = no_pooling(layer_graph, feats)
    with _stage(timer, "heads"):
        splats, fallback = predict_params(pooled, model.heads)
    if fallback:
        log.warning("%d Gaussians fell back to the identity rotation", fallback)

    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    renders, gts, psnrs, ssims = [], [], [], []
    render_ms = float("nan")
    if targets:
        with _stage(timer, "render"):
            for cam in targets:
                renders.append(render(splats, cam, bg, config.band_rows, jobs))
        with _stage(timer, "metrics"):
            for cam, img in zip(targets, renders):
                gt = raytrace(scene, cam).image
                gts.append(gt)
                psnrs.append(psnr(img, gt))
                ssims.append(ssim(img, gt) if min(gt.shape[:2]) >= 11 else float("nan"))
        if measure_render and config.render_frames > 0:
            render_ms = time_frames(lambda: render(splats, targets[0], bg, config.band_rows, jobs),
                                    frames=config.render_frames, warmup=1)
    lifted = sum(len(n) for n in nodes)
    report = EvalReport(psnrs, ssims, lifted, len(splats), render_ms, dict(timer.ms))
    result = PipelineResult(splats, report, pooled, pool_graph_ or layer_graph, nodes, renders, gts, fallback)
    if out_dir is not None:
        write_outputs(result, config, out_dir)
    return result


def write_outputs(result: PipelineResult, config: PipelineConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    h = config.hash()
    write_splats(result.splats, os.path.join(out_dir, "splats.ply"), comments=[f"config_hash {h}"])
    write_sidecar(os.path.join(out_dir, "splats.json"), config.feat_dim, result.splats.source_view, h)
    for k, img in enumerate(result.renders):
        write_ppm(os.path.join(out_dir, f"target{k:02d}.ppm"), img, f"config_hash {h}")
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump({"config_hash": h, **result.report.to_dict(), "fallback_rotations": result.fallback_count},
                  f, indent=2, sort_keys=True)


# -- fitting ------------------------------------------------------------------------

def make_samples(config: PipelineConfig, mode: str, scenes, resolution=None, views=None):
    """Training samples (fixed pooling selection) for each (scene, rig)."""
    res = resolution or config.fit_resolution
    n = views or config.fit_views
    _, pooling = MODES[mode]
    cfg = config.replace(width=res, height=res)
    samples = []
    for scene, rig in scenes:
        vb = [raytrace(scene, c) for c in rig.cameras(n, res, res)]
        nodes, feats = lift_inputs(vb, cfg)
        layer_graph, pgraph = mode_graphs(nodes, cfg, mode)
        pooled = pool_graph(pgraph, feats, pooling_config(cfg)) if pooling else no_pooling(layer_graph, feats)
        hw = res * res
        sel = pooled.source_view * hw + pooled.node.pixel_index
        colors = np.concatenate([v.image.reshape(-1, 3) for v in vb])[sel]
        hit = np.concatenate([v.hit.reshape(-1) for v in vb])[sel]
        samples.append(Sample(layer_graph, feats, sel, pooled.base_scales(), colors, np.where(hit, 0.95, 0.05)))
    return samples


def save_model(path, model: Model, config: PipelineConfig, mode: str) -> None:
    arrays = {**layers_to_arrays(model.layers), **model.heads.to_arrays()}
    meta = {"mode": mode, "aggregation": model.aggregation, "activation": model.heads.activation}
    save_weights(path, arrays, config.hash(), meta)


def load_model(path):
    """(Model, mode, config hash the weights were fitted under)."""
    arrays, config_hash, meta = load_weights(path)
    act = meta.get("activation", "relu")
    model = Model(layers_from_arrays(arrays, act), HeadWeights.from_arrays(arrays, act),
                  meta.get("aggregation", "mean"))
    return model, meta.get("mode", "ggn"), config_hash


def fit_model(config: PipelineConfig, mode: str, scenes, steps=None):
    samples = make_samples(config, mode, scenes)
    model = init_model(config, mode)
    fc = FitConfig(lr=config.fit_lr, steps=config.fit_steps if steps is None else steps, seed=config.seed)
    return fit_heads(samples, model, fc)


# -- benchmark ------------------------------------------------------------------------

TABLE_FIELDS = ["scene", "views", "method", "psnr", "ssim", "lpips", "gaussians_k", "gaussians", "config_hash"]
TIMING_FIELDS = ["scene", "views", "method", "render_ms", "fps"]


def _bench_row(args):
    name, scene, rig, n, mode, config, model = args
    cams = rig.cameras(n, config.width, config.height)
    targets = rig.targets(n, config.width, config.height, config.max_targets)
    res = run_pipeline(scene, cams, targets, config, mode, model)
    expected = union_count(n, config.height, config.width)
    if mode in ("union-baseline", "vanilla", "no-pooling") and res.report.gaussian_count != expected:
        raise PipelineError("benchmark", f"union count {res.report.gaussian_count} != {expected}")
    return {
        "scene": name, "views": n, "method": mode,
        "psnr": res.report.mean_psnr, "ssim": res.report.mean_ssim, "lpips": "n/a",
        "gaussians_k": res.report.gaussian_count / 1000.0, "gaussians": res.report.gaussian_count,
        "config_hash": config.hash(), "render_ms": res.report.render_ms, "fps": res.report.fps,
    }


def benchmark(config: PipelineConfig, suite, models: Optional[dict] = None, jobs: int = 1, fit: bool = True):
    """One row per (scene, views, mode). `suite` is a list of (name, scene, rig)."""
    models = dict(models or {})
    for mode in config.modes:
        if mode not in models:
            if fit:
                log.info("fitting weights for mode %s", mode)
                models[mode] = fit_model(config, mode, [(s, r) for _, s, r in suite]).model
            else:
                models[mode] = init_model(config, mode)
    tasks = [(name, scene, rig, n, mode, config, models[mode])
             for name, scene, rig in suite for n in config.view_counts for mode in config.modes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_bench_row, tasks))
    else:
        rows = [_bench_row(t) for t in tasks]
    return rows, models


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_table(rows, path, fields=TABLE_FIELDS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def summarize(rows) -> list:
    """Average over scenes: one row per (views, method), Table-1 style."""
    out = []
    keys = sorted({(r["views"], r["method"]) for r in rows}, key=lambda k: (k[0], k[1]))
    for views, method in keys:
        sel = [r for r in rows if r["views"] == views and r["method"] == method]
        out.append({
            "scene": "mean", "views": views, "method": method,
            "psnr": float(np.mean([r["psnr"] for r in sel])),
            "ssim": float(np.mean([r["ssim"] for r in sel])),
            "lpips": "n/a",
            "gaussians_k": float(np.mean([r["gaussians_k"] for r in sel])),
            "gaussians": int(round(np.mean([r["gaussians"] for r in sel]))),
            "config_hash": sel[0]["config_hash"],
            "render_ms": float(np.mean([r["render_ms"] for r in sel])),
            "fps": float(np.mean([r["fps"] for r in sel])),
        })
    return out


def count_arithmetic(view_counts=(4, 8, 16), height: int = 256, width: int = 256) -> list:
    """Union-of-views Gaussian counts at one and three Gaussians per pixel."""
    return [{"views": n, "per_pixel_1": union_count(n, height, width, 1),
             "per_pixel_3": union_count(n, height, width, 3)} for n in view_counts]
