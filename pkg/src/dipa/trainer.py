"""Support-set fine-tuning of adapters and anchors.

The support set is pushed once through the frozen blocks below the tuning
depth (the prefix cache); every iteration then replays only the adapted
suffix, fuses the top ``d_f`` [cls] features, evaluates the loss, and takes
one NAdam step for the adapters and one for the anchors.

NAdam update, per parameter at step t (g: gradient, lr: learning rate)::

    mu_t      = beta1 * (1 - 0.5 * 0.96 ** (t * psi))
    mu_next   = beta1 * (1 - 0.5 * 0.96 ** ((t + 1) * psi))
    prod_t    = prod_{i<=t} mu_i
    m         = beta1 * m + (1 - beta1) * g
    v         = beta2 * v + (1 - beta2) * g**2
    denom     = sqrt(v / (1 - beta2 ** t)) + eps
    p        -= lr * (1 - mu_t) / (1 - prod_t) * g / denom
    p        -= lr * mu_next / (1 - prod_t * mu_next) * m / denom
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import backbone as B
from . import grad as G
from .adapter import AdapterInit, AdapterSet, attach
from .errors import NonFiniteError, NumericalError, UsageError
from .objective import AnchorSet, LossParams, init_anchors, ncc_loss, proxy_anchor_loss
from .tensor import Rng, all_finite

LOSSES = ("proxy_anchor", "ncc_mean")


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 80
    lr_adapters: float = 0.005
    lr_anchors: float = 5.0
    loss: str = "proxy_anchor"
    d_t: int = 7
    d_f: int = 4
    adapter_init: str = "constant"
    adapter_sigma: float = 0.02
    anchor_init: str = "random"
    margin: float = 0.1
    scale: float = 32.0
    temperature: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 0.004
    use_cache: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise UsageError("iterations must be at least 1")
        if self.lr_adapters < 0 or self.lr_anchors < 0:
            raise UsageError("learning rates must be non-negative")
        if self.loss not in LOSSES:
            raise UsageError(f"loss must be one of {LOSSES}")
        if self.anchor_init not in ("random", "custom"):
            raise UsageError("anchor_init must be 'random' or 'custom'")
        AdapterInit(self.adapter_init, self.adapter_sigma)
        LossParams(self.margin, self.scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FinetuneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown finetune config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "FinetuneConfig":
        return replace(self, **kw)


@dataclass
class NAdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    mu_product: float = 1.0


def nadam_step(param: np.ndarray, grad: np.ndarray, state: NAdamState | None, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, momentum_decay: float = 0.004):
    """One NAdam update; returns ``(new_param, new_state)`` without mutating inputs."""
    if grad.shape != param.shape:
        raise UsageError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not all_finite(grad):
        raise NonFiniteError("non-finite gradient passed to nadam_step")
    if state is None:
        state = NAdamState(np.zeros_like(param), np.zeros_like(param))
    t = state.step + 1
    mu = beta1 * (1.0 - 0.5 * 0.96 ** (t * momentum_decay))
    mu_next = beta1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * momentum_decay))
    mu_product = state.mu_product * mu
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    denom = np.sqrt(v / (1.0 - beta2**t)) + eps
    new = param - lr * (1.0 - mu) / (1.0 - mu_product) * grad / denom
    new = new - lr * mu_next / (1.0 - mu_product * mu_next) * m / denom
    return new.astype(param.dtype, copy=False), NAdamState(m, v, t, mu_product)


class NAdam:
    """Holds per-parameter NAdam state for a named parameter group."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, momentum_decay=0.004):
        self.lr = lr
        self.hyper = dict(beta1=beta1, beta2=beta2, eps=eps, momentum_decay=momentum_decay)
        self.state: dict[str, NAdamState] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            out[name], self.state[name] = nadam_step(p, grads[name], self.state.get(name), self.lr, **self.hyper)
        return out


@dataclass
class PrefixCache:
    boundary: int  # number of frozen blocks already applied to ``tokens``
    tokens: np.ndarray  # [M, T, e]
    frozen_cls: dict = field(default_factory=dict)  # layer -> [M, e], frozen layers needed for fusion

    @property
    def nbytes(self) -> int:
        return self.tokens.nbytes + sum(z.nbytes for z in self.frozen_cls.values())


def build_prefix_cache(config: B.BackboneConfig, weights, images: np.ndarray, d_t: int, d_f: int) -> PrefixCache:
    L = config.depth
    if not 0 <= d_t <= L:
        raise UsageError(f"tuning depth d_t={d_t} outside [0, {L}]")
    if not 1 <= d_f <= L:
        raise UsageError(f"fusion depth d_f={d_f} outside [1, {L}]")
    boundary = L - d_t
    x = B.embed(config, weights, images)
    x, cls = B.run_blocks(config, weights, x, 0, boundary, keep_cls_from=L - d_f)
    return PrefixCache(boundary, x, cls)


def suffix_features(config: B.BackboneConfig, weights, cache: PrefixCache, adapters, d_f: int):
    """Fused features of the cached support set under ``adapters``."""
    L = config.depth
    _, cls = B.run_blocks(config, weights, cache.tokens, cache.boundary, L, adapters,
                          keep_cls_from=max(cache.boundary, L - d_f))
    zs = {**cache.frozen_cls, **cls}
    return G.concat([zs[l] for l in range(L, L - d_f, -1)], axis=-1)


def full_features(config: B.BackboneConfig, weights, images: np.ndarray, adapters, d_f: int):
    """Fused features from raw images, no caching."""
    L = config.depth
    x = B.embed(config, weights, images)
    _, cls = B.run_blocks(config, weights, x, 0, L, adapters, keep_cls_from=L - d_f)
    return G.concat([cls[l] for l in range(L, L - d_f, -1)], axis=-1)


def embed_images(config: B.BackboneConfig, weights, images: np.ndarray, adapters: AdapterSet | None, d_f: int,
                 batch_size: int = 256) -> np.ndarray:
    parts = [
        full_features(config, weights, images[i : i + batch_size], adapters, d_f)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(parts, axis=0)


@dataclass
class FinetuneResult:
    adapters: AdapterSet
    anchors: AnchorSet
    loss_trace: np.ndarray
    cache_bytes: int = 0

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.adapters.named_tensors())
        out["anchors"] = self.anchors.anchors
        out["loss_trace"] = np.asarray(self.loss_trace, dtype=np.float64)
        return out


def _leaves(tape: G.Tape, adapters: AdapterSet) -> dict:
    live = {}
    for j in adapters.layers:
        live[j] = {}
        for site, (gamma, beta) in adapters.params[j].items():
            live[j][site] = (tape.leaf(gamma, f"ssf.{j}.{site}.gamma"), tape.leaf(beta, f"ssf.{j}.{site}.beta"))
    return live


def finetune(config: B.BackboneConfig, weights, fcfg: FinetuneConfig, images: np.ndarray, labels,
             n_way: int | None = None) -> FinetuneResult:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or len(images) != len(labels):
        raise UsageError("support set must be non-empty with one label per image")
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way)
    if len(counts) > n_way or np.any(counts == 0):
        raise UsageError("every support class needs at least one sample")
    L = config.depth
    if not 0 <= fcfg.d_t <= L:
        raise UsageError(f"tuning depth d_t={fcfg.d_t} outside [0, {L}]")
    dtype = weights["pos_embed"].dtype
    images = images.astype(dtype, copy=False)
    rng = Rng(fcfg.seed)

    adapters = attach(config, fcfg.d_t, AdapterInit(fcfg.adapter_init, fcfg.adapter_sigma), rng.spawn(1), dtype)
    cache = build_prefix_cache(config, weights, images, fcfg.d_t, fcfg.d_f) if fcfg.use_cache else None

    def features(ad):
        if cache is not None:
            return suffix_features(config, weights, cache, ad, fcfg.d_f)
        return full_features(config, weights, images, ad, fcfg.d_f)

    dim = fcfg.d_f * config.embed_dim
    if fcfg.anchor_init == "custom":
        anchors = init_anchors(n_way, dim, "custom", embeddings=features(None), labels=labels, dtype=dtype)
    else:
        anchors = init_anchors(n_way, dim, "random", rng=rng.spawn(2), dtype=dtype)

    params = LossParams(fcfg.margin, fcfg.scale)
    hyper = dict(beta1=fcfg.beta1, beta2=fcfg.beta2, eps=fcfg.eps, momentum_decay=fcfg.momentum_decay)
    opt_adapters = NAdam(fcfg.lr_adapters, **hyper)
    opt_anchors = NAdam(fcfg.lr_anchors, **hyper)
    trace = np.empty(fcfg.iterations, dtype=np.float64)

    for it in range(fcfg.iterations):
        tape = G.Tape()
        live = _leaves(tape, adapters)
        A = tape.leaf(anchors.anchors, "anchors")
        try:
            Z = features(live)
            if fcfg.loss == "proxy_anchor":
                loss = proxy_anchor_loss(Z, labels, A, params)
            else:
                loss = ncc_loss(Z, labels, fcfg.temperature, n_way)
            value = float(G.value(loss))
            if not math.isfinite(value):
                raise NonFiniteError("non-finite loss")
            if isinstance(loss, G.Var):
                grads = tape.backward(loss)
            else:
                grads = {name: np.zeros_like(v.value) for name, v in tape.leaves.items()}
        except NumericalError as exc:
            raise type(exc)(f"iteration {it}: {exc}") from None
        trace[it] = value

        named = adapters.named_tensors()
        updated = opt_adapters.step(named, grads)
        adapters = AdapterSet.from_named_tensors(config, updated) if updated else adapters
        anchors = AnchorSet(opt_anchors.step({"anchors": anchors.anchors}, grads)["anchors"], anchors.init)

    return FinetuneResult(adapters, anchors, trace, cache.nbytes if cache is not None else 0)
