"""Hand-written reverse-mode gradients, finite-difference checks and head fitting.

Pooling is a geometric selection (it never looks at features), so during
fitting it is computed once and gradients flow only into survivors.
Adjacency and edge operators are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ggn import (GraphLayerWeights, activate, activate_grad, aggregate, gather_matrix,
                  init_weights, NetworkConfig)
from .heads import HEAD_DIMS, HeadWeights, PROB_EPS, SCALE_CLAMP, activate_outputs, init_heads, sigmoid


class FitDivergence(RuntimeError):
    pass


# -- graph layers ---------------------------------------------------------------

@dataclass
class LayerTape:
    inputs: list  # per-node input features
    gathered: list  # per-node aggregated inputs (before W)
    pre: list  # per-node pre-activations
    outputs: list


def forward_tape(graph, features, layers, aggregation: str = "mean"):
    """Forward pass recording what the reverse pass needs. Returns (outputs, tape)."""
    tape = []
    f = [np.asarray(x, dtype=np.float64) for x in features]
    for layer in layers:
        gathered = aggregate(graph, f, aggregation)
        pre = []
        for g in gathered:
            z = g @ layer.W
            if layer.bias is not None:
                z = z + layer.bias
            pre.append(z)
        out = [activate(z, layer.activation) for z in pre]
        tape.append(LayerTape(f, gathered, pre, out))
        f = out
    return f, tape


def _transpose_gather(graph, i, j, grad, aggregation):
    op = graph.operator(i, j)
    if op.is_identity():
        return grad.copy()
    return np.asarray(gather_matrix(op, aggregation).T @ grad)


def backward_graph_linear(graph, tape: LayerTape, layer: GraphLayerWeights, upstream, aggregation: str = "mean"):
    """Adjoint of one graph layer. Returns (dW, db or None, d_inputs per node)."""
    n = graph.num_nodes
    if len(upstream) != n or any(u.shape != z.shape for u, z in zip(upstream, tape.pre)):
        raise ValueError("upstream gradient shapes do not match the tape")
    dW = np.zeros_like(layer.W)
    db = None if layer.bias is None else np.zeros_like(layer.bias)
    dgathered = []
    for i in range(n):
        dz = upstream[i] * activate_grad(tape.pre[i], layer.activation)
        dW += tape.gathered[i].T @ dz
        if db is not None:
            db += dz.sum(axis=0)
        dgathered.append(dz @ layer.W.T)
    d_inputs = [np.zeros_like(x) for x in tape.inputs]
    for i in range(n):
        for j in graph.neighbors(i):
            w = graph.scaled_adjacency[i, j]
            if w == 0:
                continue
            d_inputs[j] += w * _transpose_gather(graph, i, j, dgathered[i], aggregation)
    return dW, db, d_inputs


def backward_layers(graph, tapes, layers, upstream, aggregation: str = "mean"):
    grads = {}
    g = upstream
    for k in reversed(range(len(layers))):
        dW, db, g = backward_graph_linear(graph, tapes[k], layers[k], g, aggregation)
        grads[f"layer{k}.W"] = dW
        if db is not None:
            grads[f"layer{k}.b"] = db
    return grads, g


# -- heads ----------------------------------------------------------------------

def heads_forward(features, heads: HeadWeights, base_scale):
    cache = {"x": features, "hidden": {}, "raw": {}}
    for name, mlp in heads.items():
        z1, h = mlp.hidden(features, heads.activation)
        cache["hidden"][name] = (z1, h)
        cache["raw"][name] = h @ mlp.W2 + mlp.b2
    params, _ = activate_outputs(cache["raw"], base_scale)
    cache["params"] = params
    return params, cache


def heads_backward(cache, heads: HeadWeights, dparams: dict):
    """Gradients of head weights and input features from gradients on activated params."""
    raw, p = cache["raw"], cache["params"]
    draw = {}

    r = raw["rotation"]
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    q = p["quats"]
    g = dparams.get("quats", np.zeros_like(q))
    safe = np.where(norm == 0, 1.0, norm)
    dr = (g - q * np.sum(q * g, axis=1, keepdims=True)) / safe
    draw["rotation"] = np.where(norm == 0, 0.0, dr)

    s = raw["scale"]
    inside = np.abs(s) < SCALE_CLAMP
    draw["scale"] = dparams.get("scales", np.zeros_like(s)) * p["scales"] * inside

    for name, key, val in (("opacity", "opacities", raw["opacity"]), ("color", "colors", raw["color"])):
        sg = sigmoid(val)
        live = (sg > PROB_EPS) & (sg < 1 - PROB_EPS)
        up = dparams.get(key, np.zeros(p[key].shape))
        if name == "opacity":
            up = up[:, None]
        draw[name] = up * sg * (1 - sg) * live

    grads = {}
    dx = np.zeros_like(cache["x"])
    for name, mlp in heads.items():
        z1, h = cache["hidden"][name]
        d = draw[name]
        grads[f"head.{name}.W2"] = h.T @ d
        grads[f"head.{name}.b2"] = d.sum(axis=0)
        dh = d @ mlp.W2.T
        dz1 = dh * activate_grad(z1, heads.activation)
        grads[f"head.{name}.W1"] = cache["x"].T @ dz1
        grads[f"head.{name}.b1"] = dz1.sum(axis=0)
        dx += dz1 @ mlp.W1.T
    return grads, dx


# -- full model -------------------------------------------------------------------

@dataclass
class Model:
    layers: list
    heads: HeadWeights
    aggregation: str = "mean"

    def params(self) -> dict:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"layer{k}.W"] = layer.W
            if layer.bias is not None:
                out[f"layer{k}.b"] = layer.bias
        out.update(self.heads.to_arrays())
        return out

    def set_params(self, params: dict) -> None:
        for k, layer in enumerate(self.layers):
            layer.W = params[f"layer{k}.W"]
            if layer.bias is not None:
                layer.bias = params[f"layer{k}.b"]
        for name, mlp in self.heads.items():
            for part in ("W1", "b1", "W2", "b2"):
                setattr(mlp, part, params[f"head.{name}.{part}"])


@dataclass
class Sample:
    """One training instance with a fixed pooling selection."""

    graph: object
    features: list  # per-node encoder features
    selection: np.ndarray  # indices into the concatenated node features
    base_scale: np.ndarray
    target_color: np.ndarray
    target_opacity: np.ndarray


def model_forward(model: Model, sample: Sample):
    if model.layers:
        outs, tapes = forward_tape(sample.graph, sample.features, model.layers, model.aggregation)
    else:
        outs, tapes = [np.asarray(f, dtype=np.float64) for f in sample.features], []
    stacked = np.concatenate(outs)
    feats = stacked[sample.selection]
    params, cache = heads_forward(feats, model.heads, sample.base_scale)
    return params, (outs, tapes, cache)


def model_backward(model: Model, sample: Sample, state, dparams):
    outs, tapes, cache = state
    grads, dfeat = heads_backward(cache, model.heads, dparams)
    if model.layers:
        sizes = [len(o) for o in outs]
        dstack = np.zeros((sum(sizes), outs[0].shape[1]))
        np.add.at(dstack, sample.selection, dfeat)
        split = np.split(dstack, np.cumsum(sizes)[:-1])
        lg, _ = backward_layers(sample.graph, tapes, model.layers, split, model.aggregation)
        grads.update(lg)
    return grads


@dataclass
class LossWeights:
    color: float = 1.0
    opacity: float = 1.0
    scale: float = 0.1
    scale_target: float = 0.5  # regress scales toward this fraction of the pixel footprint


def regression_loss(params, sample: Sample, weights: LossWeights):
    """Mean-squared regression toward oracle colour/opacity and a footprint-relative scale."""
    k = len(sample.selection)
    dc = params["colors"] - sample.target_color
    do = params["opacities"] - sample.target_opacity
    log_s = np.log(params["scales"] / (weights.scale_target * sample.base_scale[:, None]))
    color_mse = float(np.mean(dc * dc))
    loss = (weights.color * color_mse + weights.opacity * float(np.mean(do * do))
            + weights.scale * float(np.mean(log_s * log_s)))
    grads = {
        "colors": weights.color * 2 * dc / (3 * k),
        "opacities": weights.opacity * 2 * do / k,
        "scales": weights.scale * 2 * log_s / (3 * k) / params["scales"],
    }
    return loss, color_mse, grads


# -- fitting --------------------------------------------------------------------

@dataclass
class FitConfig:
    lr: float = 1e-3
    steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    divergence: float = 1e6


@dataclass
class FitResult:
    model: Model
    losses: list
    color_mse: list


def fit_heads(samples, model: Model, config: Optional[FitConfig] = None) -> FitResult:
    """Adam on the summed regression loss over all samples (full batch)."""
    config = config or FitConfig()
    params = {k: v.copy() for k, v in model.params().items()}
    model.set_params(params)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(x) for k, x in params.items()}
    losses, cmse = [], []
    for step in range(1, config.steps + 1):
        total, total_c = 0.0, 0.0
        grads = {k: np.zeros_like(x) for k, x in params.items()}
        for s in samples:
            p, state = model_forward(model, s)
            loss, c, dparams = regression_loss(p, s, config.loss)
            g = model_backward(model, s, state, dparams)
            for k in g:
                grads[k] += g[k] / len(samples)
            total += loss / len(samples)
            total_c += c / len(samples)
        if not np.isfinite(total) or total > config.divergence:
            raise FitDivergence(f"loss {total!r} at step {step}")
        losses.append(total)
        cmse.append(total_c)
        b1, b2 = config.beta1, config.beta2
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            mhat = m[k] / (1 - b1 ** step)
            vhat = v[k] / (1 - b2 ** step)
            params[k] = params[k] - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        model.set_params(params)
    return FitResult(model, losses, cmse)


def evaluate_loss(model: Model, samples, weights: Optional[LossWeights] = None):
    weights = weights or LossWeights()
    total, total_c = 0.0, 0.0
    for s in samples:
        p, _ = model_forward(model, s)
        loss, c, _ = regression_loss(p, s, weights)
        total += loss / len(samples)
        total_c += c / len(samples)
    return total, total_c


# -- gradient checking ------------------------------------------------------------

@dataclass
class GradcheckReport:
    component: str
    max_rel_error: float
    checked: int
    failures: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"component": self.component, "passed": self.passed, "max_rel_error": self.max_rel_error,
                "checked": self.checked, "failures": self.failures[:50], "tolerance": self.tolerance}


def rel_error(a, n, floor: float = 1e-8):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def compare_gradients(fn, params: dict, analytic: dict, step: float = 1e-5, tol: float = 1e-5,
                      component: str = "") -> GradcheckReport:
    """Central differences of scalar fn(params) against `analytic`, entry by entry."""
    worst, failures, checked = 0.0, [], 0
    for name in sorted(analytic):
        p = params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            fp = fn()
            p[idx] = orig - step
            fm = fn()
            p[idx] = orig
            num[idx] = (fp - fm) / (2 * step)
        err = rel_error(analytic[name], num)
        checked += err.size
        worst = max(worst, float(err.max()) if err.size else 0.0)
        for idx in zip(*np.nonzero(err >= tol)):
            failures.append({"param": name, "index": [int(i) for i in idx], "analytic": float(analytic[name][idx]),
                             "numeric": float(num[idx]), "rel_error": float(err[idx])})
    return GradcheckReport(component, worst, checked, failures, tol)


def _toy(edges: bool, seed: int, feat_dim: int = 8, size: int = 6):
    """Two overlapping views of a textured plane, small enough for finite differences."""
    from .gaussians import lift_view
    from .geometry import look_at, make_camera
    from .graph import build_graph
    from .pooling import PoolingConfig, pool_graph
    from .synth import AnalyticScene, Checker, Plane, encode_features, oracle_depth, raytrace

    scene = AnalyticScene([Plane((0, 0, 4), (0, 0, -1.0), None, Checker(0.4, (0.9, 0.2, 0.1), (0.1, 0.5, 0.8)))],
                          (0.0, 0.0, 0.0))
    cams = [make_camera(size, size, 60.0, look_at((x, 0.0, 0.0), (x, 0.0, 4.0))) for x in (0.0, 0.35)]
    views = [raytrace(scene, c) for c in cams]
    rng = np.random.default_rng(seed)
    nodes, feats = [], []
    for k, v in enumerate(views):
        f = encode_features(v, feat_dim) + 0.1 * rng.standard_normal((size * size, feat_dim))
        nodes.append(lift_view(v.camera, oracle_depth(v), f, k))
        feats.append(f)
    graph = build_graph(nodes, top_n=1 if edges else 0)
    pooled = pool_graph(graph, feats, PoolingConfig())
    hw = size * size
    selection = pooled.source_view * hw + pooled.node.pixel_index
    return graph, feats, pooled, selection


def gradcheck(component: str = "full-stack", seed: int = 0, activation: str = "gelu", edges: bool = True,
              aggregation: str = "mean", step: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """component: "layer" | "heads" | "full-stack"."""
    rng = np.random.default_rng([seed, 11])
    graph, feats, pooled, selection = _toy(edges, seed)
    dim = feats[0].shape[1]
    if component == "layer":
        config = NetworkConfig(num_layers=1, feat_dim=dim, activation=activation, aggregation=aggregation, seed=seed)
        layers = init_weights(config)
        layers[0].bias = 0.1 * rng.standard_normal(dim)
        coef = [rng.standard_normal(f.shape) for f in feats]
        _nudge(graph, feats, layers, aggregation)

        def loss():
            outs, _ = forward_tape(graph, feats, layers, aggregation)
            return sum(float(np.sum(c * o)) for c, o in zip(coef, outs))

        _, tapes = forward_tape(graph, feats, layers, aggregation)
        dW, db, dx = backward_graph_linear(graph, tapes[0], layers[0], coef, aggregation)
        params = {"layer0.W": layers[0].W, "layer0.b": layers[0].bias}
        for k, f in enumerate(feats):
            params[f"input{k}"] = f
        analytic = {"layer0.W": dW, "layer0.b": db, **{f"input{k}": g for k, g in enumerate(dx)}}
        return compare_gradients(loss, params, analytic, step, tol, f"layer(edges={edges})")

    heads = init_heads(dim, seed, activation)
    for _, mlp in heads.items():
        mlp.b1 += 0.1 * rng.standard_normal(mlp.b1.shape)
        mlp.b2 += 0.1 * rng.standard_normal(mlp.b2.shape)
    if component == "heads":
        layers = []
    elif component == "full-stack":
        config = NetworkConfig(num_layers=2, feat_dim=dim, activation=activation, aggregation=aggregation, seed=seed)
        layers = init_weights(config)
        for layer in layers:
            layer.bias = 0.1 * rng.standard_normal(dim)
        _nudge(graph, feats, layers, aggregation)
    else:
        raise ValueError(f"unknown gradcheck component {component!r}")
    model = Model(layers, heads, aggregation)
    base = pooled.base_scales()
    sample = Sample(graph, feats, selection, base, np.zeros((len(selection), 3)), np.zeros(len(selection)))
    coef = {"quats": rng.standard_normal((len(selection), 4)), "scales": rng.standard_normal((len(selection), 3)),
            "opacities": rng.standard_normal(len(selection)), "colors": rng.standard_normal((len(selection), 3))}
    # scales live on the order of a pixel footprint; rescale so every term matters
    coef["scales"] /= base[:, None]

    def loss():
        p, _ = model_forward(model, sample)
        return sum(float(np.sum(coef[k] * p[k])) for k in coef)

    _nudge_heads(model, sample)
    p, state = model_forward(model, sample)
    analytic = model_backward(model, sample, state, coef)
    name = f"{component}(edges={edges})" if layers else component
    return compare_gradients(loss, model.params(), analytic, step, tol, name)


def _nudge(graph, feats, layers, aggregation, margin: float = 1e-3):
    """Shift biases so no pre-activation sits at a relu kink."""
    for _ in range(100):
        _, tapes = forward_tape(graph, feats, layers, aggregation)
        bad = False
        for layer, tape in zip(layers, tapes):
            if layer.activation != "relu":
                continue
            close = np.any(np.concatenate([np.abs(z) < margin for z in tape.pre]), axis=0)
            if close.any():
                layer.bias = layer.bias + np.where(close, 3 * margin, 0.0)
                bad = True
        if not bad:
            return


def _nudge_heads(model: Model, sample: Sample, margin: float = 1e-3):
    """Same as `_nudge` for the hidden layer of every head."""
    if model.heads.activation != "relu":
        return
    for _ in range(100):
        _, (_, _, cache) = model_forward(model, sample)
        bad = False
        for name, mlp in model.heads.items():
            close = np.any(np.abs(cache["hidden"][name][0]) < margin, axis=0)
            if close.any():
                mlp.b1 = mlp.b1 + np.where(close, 3 * margin, 0.0)
                bad = True
        if not bad:
            return
