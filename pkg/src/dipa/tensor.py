"""Dense numerical kernels and the seeded random source.

Tensors are plain row-major ``numpy.ndarray`` values of dtype float32 or
float64. Every kernel here is a pure function: it never mutates its inputs
and it refuses to return non-finite values.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateVectorError, NonFiniteError, ShapeError, UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}
EPS_NORM = 1e-12
LN_EPS = 1e-6


def dtype_of(name: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[name])
    except KeyError:
        raise UsageError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in DTYPES.items():
        if np.dtype(dt) == dtype:
            return name
    raise UsageError(f"unsupported element type {dtype}")


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return check_finite(arr, "tensor construction")


def all_finite(x: np.ndarray) -> bool:
    # a finite sum implies finite elements; only a non-finite sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(np.add.reduce(x, axis=None)):
            return True
    return bool(np.isfinite(x).all())


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not all_finite(x):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes are batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def add(a, b) -> np.ndarray:
    try:
        out = np.add(a, b)
    except ValueError as exc:
        raise ShapeError(f"add: {exc}") from None
    return check_finite(out, "add")


def mul(a, b) -> np.ndarray:
    try:
        out = np.multiply(a, b)
    except ValueError as exc:
        raise ShapeError(f"mul: {exc}") from None
    return check_finite(out, "mul")


def layernorm_stats(x: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    if eps <= 0:
        raise UsageError("layernorm eps must be positive")
    e = x.shape[-1]
    if e == 0:
        raise ShapeError("layernorm over an empty feature axis")
    if gain.shape != (e,) or bias.shape != (e,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}/{bias.shape} do not match {e}")
    xhat, _ = layernorm_stats(x, eps)
    return check_finite(xhat * gain + bias, "layernorm")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    check_finite(x, "softmax input")
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    return check_finite(0.5 * x * (1.0 + erf(x / np.sqrt(2.0))), "gelu")


def concat(tensors: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    try:
        return np.concatenate(list(tensors), axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None


def row_norms(x: np.ndarray, eps_norm: float = EPS_NORM) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps_norm):
        raise DegenerateVectorError(f"vector norm at or below {eps_norm}")
    return norms


def l2_normalize(x: np.ndarray, eps_norm: float = EPS_NORM) -> np.ndarray:
    return check_finite(x / row_norms(x, eps_norm), "l2_normalize")


def scale_shift(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"scale_shift parameters {gamma.shape}/{beta.shape} do not match feature axis {d}")
    return check_finite(gamma * x + beta, "scale_shift")


def cosine_sim(x: np.ndarray, a: np.ndarray, eps_norm: float = EPS_NORM) -> np.ndarray:
    """Cosine similarity between rows of ``x`` and rows of ``a``.

    Two vectors give a scalar; ``x[M, D]`` with ``a[N, D]`` gives ``[M, N]``.
    Results are clamped to [-1, 1].
    """
    if x.shape[-1] != a.shape[-1]:
        raise ShapeError(f"cosine_sim dimension mismatch {x.shape} vs {a.shape}")
    xn = l2_normalize(np.atleast_2d(x), eps_norm)
    an = l2_normalize(np.atleast_2d(a), eps_norm)
    s = np.clip(xn @ an.T, -1.0, 1.0)
    if x.ndim == 1 and a.ndim == 1:
        return s[0, 0]
    if x.ndim == 1:
        return s[0]
    if a.ndim == 1:
        return s[:, 0]
    return s


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return check_finite(np.squeeze(out, axis=axis), "logsumexp")


def log1p_sum_exp(z: np.ndarray, mask: np.ndarray, axis: int = 0) -> np.ndarray:
    """``log(1 + sum(exp(z) over masked entries))`` along ``axis``, max-shifted.

    An all-false mask slice yields exactly 0.
    """
    mask = np.asarray(mask, dtype=bool)
    masked = np.where(mask, z, -np.inf)
    m = np.maximum(masked.max(axis=axis, keepdims=True), 0.0)
    total = np.exp(-m) + np.where(mask, np.exp(z - m), 0.0).sum(axis=axis, keepdims=True)
    return check_finite(np.squeeze(np.log(total) + m, axis=axis), "log1p_sum_exp")


class Rng:
    """Seeded random source backed by the PCG64 bit generator.

    PCG64 (O'Neill, 2014) has a fixed, published output stream; seeding goes
    through ``numpy.random.SeedSequence`` so ``Rng(seed)`` is reproducible
    across runs and platforms. ``spawn`` derives independent child streams
    keyed by integers, which is how per-episode streams are made.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def next_u64(self) -> int:
        return int(self._gen.bit_generator.random_raw())

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(shape)).astype(dtype)

    def trunc_normal(self, shape, std=0.02, bound=2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) truncated to [-bound*std, bound*std] by resampling."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)
