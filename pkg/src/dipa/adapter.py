"""Per-layer scale/shift adapters for the top ``d_t`` blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import SITES, BackboneConfig, param_count
from .errors import UsageError

scale_shift = T.scale_shift


@dataclass(frozen=True)
class AdapterInit:
    mode: str = "constant"  # "constant": gamma=1, beta=0; "normal": N(1, s^2) / N(0, s^2)
    sigma: float = 0.02

    def __post_init__(self):
        if self.mode not in ("constant", "normal"):
            raise UsageError(f"unknown adapter init mode {self.mode!r}")


def site_dims(config: BackboneConfig) -> dict[str, int]:
    e, h = config.embed_dim, config.hidden_dim
    return {"ln1": e, "attn": e, "ln2": e, "fc1": h, "act": h, "fc2": e}


class AdapterSet:
    """(gamma, beta) pairs at six sites in each of the top ``depth`` blocks.

    Layers are numbered 1..L; layer ``j`` is adapted iff ``j > L - depth``.
    """

    def __init__(self, config: BackboneConfig, depth: int, params: dict[int, dict[str, tuple]]):
        self.config = config
        self.depth = depth
        self.params = params

    @property
    def layers(self) -> range:
        L = self.config.depth
        return range(L - self.depth + 1, L + 1)

    def get(self, layer: int):
        return self.params.get(layer)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for j in self.layers:
            for site in SITES:
                gamma, beta = self.params[j][site]
                out[f"ssf.{j}.{site}.gamma"] = gamma
                out[f"ssf.{j}.{site}.beta"] = beta
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    @classmethod
    def from_named_tensors(cls, config: BackboneConfig, tensors: dict) -> "AdapterSet":
        layers = sorted({int(name.split(".")[1]) for name in tensors if name.startswith("ssf.")})
        depth = len(layers)
        if layers and layers != list(range(config.depth - depth + 1, config.depth + 1)):
            raise UsageError(f"adapter layers {layers} are not the top {depth} blocks")
        dims = site_dims(config)
        params = {}
        for j in layers:
            params[j] = {}
            for site in SITES:
                gamma = tensors[f"ssf.{j}.{site}.gamma"]
                beta = tensors[f"ssf.{j}.{site}.beta"]
                if gamma.shape != (dims[site],) or beta.shape != (dims[site],):
                    raise UsageError(f"adapter ssf.{j}.{site} has wrong shape")
                params[j][site] = (gamma, beta)
        return cls(config, depth, params)


def attach(config: BackboneConfig, d_t: int, init: AdapterInit = AdapterInit(), rng: T.Rng | None = None, dtype="f64") -> AdapterSet:
    if not 0 <= d_t <= config.depth:
        raise UsageError(f"tuning depth d_t={d_t} outside [0, {config.depth}]")
    if init.mode == "normal" and rng is None:
        raise UsageError("normal adapter init needs an rng")
    dt = T.dtype_of(dtype) if isinstance(dtype, str) else np.dtype(dtype)
    dims = site_dims(config)
    params = {}
    for j in range(config.depth - d_t + 1, config.depth + 1):
        params[j] = {}
        for site in SITES:
            n = dims[site]
            if init.mode == "constant":
                params[j][site] = (np.ones(n, dtype=dt), np.zeros(n, dtype=dt))
            else:
                params[j][site] = (
                    rng.normal(n, mean=1.0, std=init.sigma, dtype=dt),
                    rng.normal(n, mean=0.0, std=init.sigma, dtype=dt),
                )
    return AdapterSet(config, d_t, params)


def adapter_param_count(config: BackboneConfig, d_t: int) -> int:
    """Closed form 2 * d_t * (4e + 2h)."""
    return 2 * d_t * (4 * config.embed_dim + 2 * config.hidden_dim)


@dataclass(frozen=True)
class ParamReport:
    adapter_params: int
    anchor_params: int
    backbone_params: int

    @property
    def total(self) -> int:
        return self.adapter_params + self.anchor_params

    @property
    def adapter_ratio(self) -> float:
        return self.adapter_params / self.backbone_params

    @property
    def total_ratio(self) -> float:
        return self.total / self.backbone_params

    def to_dict(self) -> dict:
        return {
            "adapter_params": self.adapter_params,
            "anchor_params": self.anchor_params,
            "total_params": self.total,
            "backbone_params": self.backbone_params,
            "adapter_ratio": self.adapter_ratio,
            "total_ratio": self.total_ratio,
        }


def count_params(adapters: AdapterSet, anchors=None) -> ParamReport:
    """``anchors`` may be an anchor array, an object with ``.anchors``, or None."""
    if anchors is None:
        n_anchor = 0
    else:
        n_anchor = int(np.asarray(getattr(anchors, "anchors", anchors)).size)
    return ParamReport(adapters.num_params(), n_anchor, param_count(adapters.config))


def param_report(config: BackboneConfig, d_t: int, n_way: int, d_f: int) -> ParamReport:
    """Same accounting as ``count_params`` without allocating any tensors."""
    if not 0 <= d_t <= config.depth:
        raise UsageError(f"tuning depth d_t={d_t} outside [0, {config.depth}]")
    if not 1 <= d_f <= config.depth:
        raise UsageError(f"fusion depth d_f={d_f} outside [1, {config.depth}]")
    return ParamReport(
        adapter_param_count(config, d_t),
        n_way * d_f * config.embed_dim,
        param_count(config),
    )
