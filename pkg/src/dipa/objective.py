"""Fine-tuning objectives over fused embeddings.

Both losses work on cosine similarity and accept either plain arrays or tape
``Var`` handles for the embeddings and anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from . import tensor as T
from .errors import UsageError

cosine_sim = T.cosine_sim


@dataclass(frozen=True)
class LossParams:
    margin: float = 0.1  # delta
    scale: float = 32.0  # alpha

    def __post_init__(self):
        if self.scale <= 0:
            raise UsageError("proxy-anchor scale alpha must be positive")
        if self.margin < 0:
            raise UsageError("proxy-anchor margin delta must be non-negative")


@dataclass
class AnchorSet:
    anchors: np.ndarray  # [N, D]; row n is the anchor of class n
    init: str = "random"

    @property
    def n_way(self) -> int:
        return self.anchors.shape[0]


def init_anchors(n_way: int, dim: int, mode: str = "random", rng: T.Rng | None = None,
                 embeddings=None, labels=None, dtype="f64") -> AnchorSet:
    """``random``: seeded N(0, 1). ``custom``: class means of ``embeddings``."""
    dt = T.dtype_of(dtype) if isinstance(dtype, str) else np.dtype(dtype)
    if mode == "random":
        if rng is None:
            raise UsageError("random anchor init needs an rng")
        return AnchorSet(rng.normal((n_way, dim), dtype=dt), mode)
    if mode == "custom":
        from .classifier import compute_centroids

        if embeddings is None or labels is None:
            raise UsageError("custom anchor init needs support embeddings and labels")
        cents = compute_centroids(np.asarray(embeddings), labels, n_way).centroids
        return AnchorSet(cents.astype(dt), mode)
    raise UsageError(f"unknown anchor init mode {mode!r}")


def _labels(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise UsageError(f"expected {m} labels, got shape {labels.shape}")
    if m == 0:
        raise UsageError("empty embedding set")
    if labels.min() < 0:
        raise UsageError("labels must be non-negative")
    return labels.astype(np.int64)


def proxy_anchor_loss(X, labels, anchors, params: LossParams = LossParams()):
    """Proxy-anchor loss of embeddings ``X[M, D]`` against ``anchors[N, D]``.

    (1/N) * sum over anchors a of
        log(1 + sum_{x in P_a} exp(alpha * (delta - s(x, a))))
      + log(1 + sum_{x in N_a} exp(alpha * (s(x, a) + delta)))
    where P_a / N_a are the samples of / not of a's class. Both inner sums are
    max-shifted; an anchor with no positives contributes log(1) = 0 there.
    """
    A = anchors.anchors if isinstance(anchors, AnchorSet) else anchors
    m = G.value(X).shape[0]
    n = G.value(A).shape[0]
    y = _labels(labels, m)
    if y.max() >= n:
        raise UsageError(f"label {y.max()} has no anchor (only {n} anchors)")
    pos = y[:, None] == np.arange(n)[None, :]
    dtype = G.value(X).dtype
    alpha = np.asarray(params.scale, dtype=dtype)
    s = G.cosine_sim(X, A)
    pos_z = G.mul(G.add(G.mul(s, np.asarray(-1.0, dtype)), np.asarray(params.margin, dtype)), alpha)
    neg_z = G.mul(G.add(s, np.asarray(params.margin, dtype)), alpha)
    pos_term = G.sum_(G.log1p_sum_exp(pos_z, pos, axis=0))
    neg_term = G.sum_(G.log1p_sum_exp(neg_z, ~pos, axis=0))
    return G.mul(G.add(pos_term, neg_term), np.asarray(1.0 / n, dtype))


def ncc_loss(X, labels, temperature: float = 10.0, n_way: int | None = None):
    """Prototypical cross-entropy on cosine similarity to class-mean centroids.

    Centroids are recomputed from ``X`` itself, so gradients flow through them.
    """
    m = G.value(X).shape[0]
    y = _labels(labels, m)
    n = int(y.max()) + 1 if n_way is None else n_way
    counts = np.bincount(y, minlength=n)
    if np.any(counts == 0):
        raise UsageError(f"class {int(np.argmin(counts))} absent from support")
    dtype = G.value(X).dtype
    onehot = (y[:, None] == np.arange(n)[None, :]).astype(dtype)
    centroids = G.matmul((onehot / counts).T, X)
    logits = G.mul(G.cosine_sim(X, centroids), np.asarray(temperature, dtype))
    lse = G.sum_(G.logsumexp(logits, axis=1))
    picked = G.sum_(G.mul(logits, onehot))
    return G.mul(G.add(lse, G.mul(picked, np.asarray(-1.0, dtype))), np.asarray(1.0 / m, dtype))
