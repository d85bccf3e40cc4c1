"""Finite-difference verification of every adjoint and of the end-to-end loss.

Each case builds ``f(inputs) = sum(w * op(inputs))`` with a fixed random
weighting ``w``, differentiates it on a tape, and compares against central
differences computed in float64. An element passes when
``|analytic - numeric| <= rtol * max(|analytic|, |numeric|)`` or the absolute
difference is at most ``atol``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as B
from . import grad as G
from .adapter import AdapterInit, attach
from .objective import LossParams, ncc_loss, proxy_anchor_loss
from .tensor import Rng

THRESHOLDS = {"f64": (1e-4, 1e-8), "f32": (1e-2, 1e-4)}


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    passed: bool


def rel_errors(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f: Callable[[dict], float], inputs: dict, name: str, h: float = 1e-5) -> np.ndarray:
    x = inputs[name]
    out = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(inputs)
        flat[i] = orig - h
        fm = f(inputs)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def check(op: str, fn: Callable, inputs: dict, trainable=None, dtype="f64", h: float = 1e-5) -> CheckResult:
    """Compare tape gradients of ``fn(**inputs)`` (scalar) against central differences.

    ``fn`` receives arrays or Vars by keyword. The oracle always runs in float64;
    on the analytic side the inputs are cast to ``dtype`` (constants captured
    by ``fn``, such as backbone weights, keep their own precision).
    """
    rtol, atol = THRESHOLDS[dtype]
    trainable = list(inputs) if trainable is None else list(trainable)
    inputs64 = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    cast = np.float32 if dtype == "f32" else np.float64

    tape = G.Tape()
    args = {k: (tape.leaf(v.astype(cast), k) if k in trainable else v.astype(cast)) for k, v in inputs64.items()}
    grads = tape.backward(fn(**args))

    def f(vals):
        return float(G.value(fn(**vals)))

    worst = 0.0
    for name in trainable:
        numeric = numeric_grad(f, inputs64, name, h)
        err = rel_errors(grads[name].astype(np.float64), numeric, rtol, atol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return CheckResult(op, worst, worst < rtol)


def _weighted(rng: Rng, op: Callable):
    """Wrap ``op`` into a scalar function ``sum(w * op(...))`` with fixed weights."""
    cache = {}

    def fn(**kw):
        out = op(**kw)
        shape = G.value(out).shape
        if shape not in cache:
            cache[shape] = rng.normal(shape)
        w = cache[shape].astype(G.value(out).dtype)
        return G.sum_(G.mul(out, w))

    return fn


def op_cases(rng: Rng) -> list[tuple[str, Callable, dict, list | None]]:
    n = rng.normal
    mask = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 1]], dtype=bool)
    return [
        ("matmul", _weighted(rng, lambda a, b: G.matmul(a, b)), {"a": n((3, 4)), "b": n((4, 2))}, None),
        ("matmul[batched]", _weighted(rng, lambda a, b: G.matmul(a, b)), {"a": n((2, 3, 4)), "b": n((4, 5))}, None),
        ("add", _weighted(rng, lambda a, b: G.add(a, b)), {"a": n((2, 3)), "b": n(3)}, None),
        ("mul", _weighted(rng, lambda a, b: G.mul(a, b)), {"a": n((2, 3)), "b": n((2, 3))}, None),
        ("concat", _weighted(rng, lambda a, b: G.concat([a, b], axis=1)), {"a": n((2, 3)), "b": n((2, 2))}, None),
        ("layernorm", _weighted(rng, lambda x, g, b: G.layernorm(x, g, b, 1e-6)),
         {"x": n((3, 5)), "g": n(5, mean=1.0, std=0.3), "b": n(5)}, None),
        ("softmax", _weighted(rng, lambda x: G.softmax(x)), {"x": n(6)}, None),
        ("softmax[rows]", _weighted(rng, lambda x: G.softmax(x, axis=-1)), {"x": n((2, 4))}, None),
        ("gelu", _weighted(rng, lambda x: G.gelu(x)), {"x": n(7, std=2.0)}, None),
        ("l2_normalize", _weighted(rng, lambda x: G.l2_normalize(x)), {"x": n((3, 4))}, None),
        ("scale_shift", _weighted(rng, lambda x, g, b: G.scale_shift(x, g, b)),
         {"x": n((2, 3, 4)), "g": n(4), "b": n(4)}, None),
        ("cosine_sim", _weighted(rng, lambda x, a: G.cosine_sim(x, a)), {"x": n((3, 5)), "a": n((2, 5))}, None),
        ("sum", _weighted(rng, lambda x: G.sum_(x, axis=0)), {"x": n((3, 4))}, None),
        ("mean", _weighted(rng, lambda x: G.mean(x, axis=1)), {"x": n((3, 4))}, None),
        ("logsumexp", _weighted(rng, lambda x: G.logsumexp(x, axis=1)), {"x": n((3, 4), std=3.0)}, None),
        ("log1p_sum_exp", _weighted(rng, lambda z: G.log1p_sum_exp(z, mask, axis=0)), {"z": n((4, 3), std=3.0)}, None),
        ("reshape", _weighted(rng, lambda x: G.reshape(x, (4, 3))), {"x": n((2, 6))}, None),
        ("permute", _weighted(rng, lambda x: G.permute(x, (2, 0, 1))), {"x": n((2, 3, 4))}, None),
        ("getitem", _weighted(rng, lambda x: G.getitem(x, (slice(None), 1))), {"x": n((3, 4, 2))}, None),
    ]


def end_to_end_case(config: B.BackboneConfig, rng: Rng, loss: str = "proxy_anchor", n_way: int = 3, shots: int = 2, d_f: int = 2):
    """Loss of a randomly adapted tiny ViT as a function of every adapter and anchor tensor."""
    weights = B.init_random_weights(config, rng.spawn(1), "lecun", "f64")
    adapters = attach(config, config.depth, AdapterInit("normal", 0.1), rng.spawn(2), "f64")
    images = rng.normal((n_way * shots, config.in_chans, config.image_size, config.image_size))
    labels = np.repeat(np.arange(n_way), shots)
    d_f = min(d_f, config.depth)
    inputs = dict(adapters.named_tensors())
    inputs["anchors"] = rng.normal((n_way, d_f * config.embed_dim))
    params = LossParams()

    def fn(**kw):
        live = {}
        for name, v in kw.items():
            if name.startswith("ssf."):
                _, j, site, which = name.split(".")
                live.setdefault(int(j), {}).setdefault(site, {})[which] = v
        live = {j: {s: (p["gamma"], p["beta"]) for s, p in sites.items()} for j, sites in live.items()}
        x = B.embed(config, weights, images)
        _, cls = B.run_blocks(config, weights, x, 0, config.depth, live)
        Z = B.fuse_features([cls[l] for l in range(1, config.depth + 1)], d_f)
        if loss == "proxy_anchor":
            return proxy_anchor_loss(Z, labels, kw["anchors"], params)
        return ncc_loss(Z, labels, 10.0, n_way)

    trainable = list(inputs) if loss == "proxy_anchor" else [k for k in inputs if k != "anchors"]
    return fn, inputs, trainable


def run_suite(config: B.BackboneConfig | None = None, seed: int = 0, dtype: str = "f64") -> list[CheckResult]:
    config = config or B.PRESETS["tiny"]
    rng = Rng(seed)
    results = [check(name, fn, inputs, trainable, dtype) for name, fn, inputs, trainable in op_cases(rng.spawn(0))]
    for i, loss in enumerate(("proxy_anchor", "ncc_mean"), start=1):
        fn, inputs, trainable = end_to_end_case(config, rng.spawn(i), loss=loss)
        results.append(check(f"end_to_end[{loss}]", fn, inputs, trainable, dtype))
    return results
