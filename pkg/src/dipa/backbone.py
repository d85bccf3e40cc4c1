"""Pre-norm ViT encoder with scale/shift hook sites and multi-layer [cls] fusion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import grad as G
from . import tensor as T
from .errors import DataError, NonFiniteError, UsageError

SITES = ("ln1", "attn", "ln2", "fc1", "act", "fc2")
FUSION_SOURCES = ("block", "final_norm")


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    in_chans: int = 3
    ln_eps: float = T.LN_EPS
    # which [cls] vector feeds fusion: raw block output, or block output
    # passed through the final layernorm
    fusion_source: str = "block"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise UsageError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise UsageError("embed_dim must be divisible by heads")
        if self.depth < 1 or self.mlp_ratio <= 0 or self.in_chans < 1 or self.ln_eps <= 0:
            raise UsageError("invalid backbone config")
        if self.fusion_source not in FUSION_SOURCES:
            raise UsageError(f"fusion_source must be one of {FUSION_SOURCES}")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "vit-small": BackboneConfig(),
    "tiny": BackboneConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, mlp_ratio=2.0),
    "desk": BackboneConfig(image_size=8, patch_size=4, embed_dim=16, depth=4, heads=2, mlp_ratio=2.0),
}


def load_config(spec) -> BackboneConfig:
    """Accept a preset name, a JSON file path, a dict, or a config."""
    if isinstance(spec, BackboneConfig):
        return spec
    if isinstance(spec, Mapping):
        return BackboneConfig.from_dict(spec)
    if spec in PRESETS:
        return PRESETS[spec]
    try:
        with open(spec) as fh:
            return BackboneConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        raise UsageError(f"unknown backbone preset or file: {spec!r}") from None


def weight_shapes(config: BackboneConfig) -> dict[str, tuple]:
    """Every tensor name the backbone needs, with its shape, in canonical order."""
    e, h, p, c = config.embed_dim, config.hidden_dim, config.patch_size, config.in_chans
    shapes = {
        "patch_embed.weight": (e, c, p, p),
        "patch_embed.bias": (e,),
        "cls_token": (1, 1, e),
        "pos_embed": (1, config.num_tokens, e),
    }
    for i in range(config.depth):
        b = f"blocks.{i}"
        shapes.update({
            f"{b}.ln1.gain": (e,),
            f"{b}.ln1.bias": (e,),
            f"{b}.attn.qkv.weight": (3 * e, e),
            f"{b}.attn.qkv.bias": (3 * e,),
            f"{b}.attn.proj.weight": (e, e),
            f"{b}.attn.proj.bias": (e,),
            f"{b}.ln2.gain": (e,),
            f"{b}.ln2.bias": (e,),
            f"{b}.mlp.fc1.weight": (h, e),
            f"{b}.mlp.fc1.bias": (h,),
            f"{b}.mlp.fc2.weight": (e, h),
            f"{b}.mlp.fc2.bias": (e,),
        })
    shapes["final_norm.gain"] = (e,)
    shapes["final_norm.bias"] = (e,)
    return shapes


def param_count(config: BackboneConfig) -> int:
    return sum(int(np.prod(s)) for s in weight_shapes(config).values())


def validate_weights(config: BackboneConfig, weights: Mapping[str, np.ndarray], tolerant: bool = False) -> None:
    shapes = weight_shapes(config)
    for name, shape in shapes.items():
        if name not in weights:
            raise DataError(f"missing weight {name!r}")
        if tuple(weights[name].shape) != shape:
            raise DataError(f"weight {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")
    extras = sorted(set(weights) - set(shapes))
    if extras and not tolerant:
        raise DataError(f"unexpected weights: {extras[:5]}")


INIT_SCHEMES = ("trunc_normal", "lecun")


def init_random_weights(config: BackboneConfig, rng: T.Rng, scheme: str = "trunc_normal", dtype="f32") -> dict:
    """Seeded stand-in for pre-trained weights.

    ``trunc_normal``: every weight matrix, the [cls] token and the positional
    table drawn from N(0, 0.02) truncated at two standard deviations.
    ``lecun``: as above but weight matrices use std 1/sqrt(fan_in), which keeps
    activations at unit scale in small desk-sized models.
    Biases are zero and layernorm gains one under both schemes.
    """
    if scheme not in INIT_SCHEMES:
        raise UsageError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    dt = T.dtype_of(dtype) if isinstance(dtype, str) else np.dtype(dtype)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".gain"):
            weights[name] = np.ones(shape, dtype=dt)
        elif name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=dt)
        elif name.endswith(".weight") and scheme == "lecun":
            fan_in = int(np.prod(shape[1:]))
            weights[name] = rng.trunc_normal(shape, std=fan_in**-0.5, dtype=dt)
        else:
            weights[name] = rng.trunc_normal(shape, std=0.02, dtype=dt)
    return weights


@dataclass
class LayerOutputs:
    cls_per_layer: list  # z_1 .. z_L, each [B, e]
    tokens: np.ndarray | None = None  # final-norm token sequence [B, T, e]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, num_patches, C*patch*patch], channel-major inside a patch."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // patch) * (w // patch), c * patch * patch))


def embed(config: BackboneConfig, weights: Mapping, images: np.ndarray) -> np.ndarray:
    """Patch embedding as unfold + matmul, [cls] prepended, positions added."""
    c, s = config.in_chans, config.image_size
    if images.ndim != 4 or images.shape[1:] != (c, s, s):
        raise UsageError(f"images must be [B, {c}, {s}, {s}], got {images.shape}")
    w = weights["patch_embed.weight"]
    patches = patchify(images.astype(w.dtype, copy=False), config.patch_size)
    x = T.add(T.matmul(patches, w.reshape(w.shape[0], -1).T), weights["patch_embed.bias"])
    cls = np.broadcast_to(weights["cls_token"], (x.shape[0], 1, config.embed_dim))
    return T.add(np.concatenate([cls, x], axis=1), weights["pos_embed"])


def _linear(x, weights, name):
    return G.add(G.matmul(x, weights[name + ".weight"].T), weights[name + ".bias"])


def _site(x, ssf, site):
    if ssf is None or site not in ssf:
        return x
    gamma, beta = ssf[site]
    return G.scale_shift(x, gamma, beta)


def block_forward(config: BackboneConfig, weights: Mapping, i: int, x, ssf=None):
    """Block ``i`` (0-based): LN -> MHA -> residual, LN -> MLP -> residual.

    ``ssf`` maps site name to a (gamma, beta) pair; absent sites are untouched.
    """
    p = f"blocks.{i}"
    eps = config.ln_eps
    b, t, e = G.value(x).shape
    nh, dh = config.heads, config.head_dim

    h = _site(G.layernorm(x, weights[p + ".ln1.gain"], weights[p + ".ln1.bias"], eps), ssf, "ln1")
    qkv = G.permute(G.reshape(_linear(h, weights, p + ".attn.qkv"), (b, t, 3, nh, dh)), (2, 0, 3, 1, 4))
    q = G.mul(G.getitem(qkv, 0), np.asarray(dh**-0.5, dtype=G.value(qkv).dtype))
    k, v = G.getitem(qkv, 1), G.getitem(qkv, 2)
    att = G.softmax(G.matmul(q, G.permute(k, (0, 1, 3, 2))), axis=-1)
    o = G.reshape(G.permute(G.matmul(att, v), (0, 2, 1, 3)), (b, t, e))
    x = G.add(x, _site(_linear(o, weights, p + ".attn.proj"), ssf, "attn"))

    h = _site(G.layernorm(x, weights[p + ".ln2.gain"], weights[p + ".ln2.bias"], eps), ssf, "ln2")
    h = _site(_linear(h, weights, p + ".mlp.fc1"), ssf, "fc1")
    h = _site(G.gelu(h), ssf, "act")
    h = _site(_linear(h, weights, p + ".mlp.fc2"), ssf, "fc2")
    return G.add(x, h)


def cls_feature(config: BackboneConfig, weights: Mapping, x):
    z = G.getitem(x, (slice(None), 0))
    if config.fusion_source == "final_norm":
        z = G.layernorm(z, weights["final_norm.gain"], weights["final_norm.bias"], config.ln_eps)
    return z


def run_blocks(config: BackboneConfig, weights: Mapping, x, start: int, stop: int, adapters=None, keep_cls_from: int = 0):
    """Run blocks ``start .. stop-1`` (0-based) over token tensor ``x``.

    Returns the output tokens and a dict {layer number (1-based): [cls] feature}
    for layers numbered above ``keep_cls_from``.
    """
    cls = {}
    for i in range(start, stop):
        layer = i + 1
        ssf = adapters.get(layer) if adapters is not None else None
        try:
            x = block_forward(config, weights, i, x, ssf)
        except NonFiniteError as exc:
            raise NonFiniteError(f"block {i}: {exc}") from None
        if layer > keep_cls_from:
            cls[layer] = cls_feature(config, weights, x)
    return x, cls


def forward(config: BackboneConfig, weights: Mapping, images: np.ndarray, adapters=None) -> LayerOutputs:
    if adapters is not None and getattr(adapters, "depth", 0) > config.depth:
        raise UsageError("adapter depth exceeds backbone depth")
    x = embed(config, weights, images)
    x, cls = run_blocks(config, weights, x, 0, config.depth, adapters)
    tokens = T.layernorm(G.value(x), weights["final_norm.gain"], weights["final_norm.bias"], config.ln_eps)
    return LayerOutputs([cls[l] for l in range(1, config.depth + 1)], tokens)


def fuse_features(outputs, d_f: int):
    """concat(z_L, z_{L-1}, ..., z_{L-d_f+1}) along the feature axis.

    ``outputs`` is a LayerOutputs or a plain list of per-layer [cls] features.
    """
    zs = outputs.cls_per_layer if isinstance(outputs, LayerOutputs) else list(outputs)
    depth = len(zs)
    if not 1 <= d_f <= depth:
        raise UsageError(f"fusion depth d_f={d_f} outside [1, {depth}]")
    return G.concat([zs[l - 1] for l in range(depth, depth - d_f, -1)], axis=-1)


def fused_dim(config: BackboneConfig, d_f: int) -> int:
    if not 1 <= d_f <= config.depth:
        raise UsageError(f"fusion depth d_f={d_f} outside [1, {config.depth}]")
    return d_f * config.embed_dim
