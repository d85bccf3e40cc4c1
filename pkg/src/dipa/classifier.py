"""Nearest-centroid query classification and cluster diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import UsageError


@dataclass
class CentroidSet:
    centroids: np.ndarray  # [N, D]
    source: str = "mean"  # "mean" | "anchor"


def compute_centroids(embeddings: np.ndarray, labels, n_way: int | None = None) -> CentroidSet:
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n)
    if len(counts) > n or np.any(counts == 0):
        raise UsageError("every class 0..N-1 needs at least one support sample")
    sums = np.zeros((n, embeddings.shape[1]), dtype=embeddings.dtype)
    np.add.at(sums, labels, embeddings)
    return CentroidSet(sums / counts[:, None].astype(embeddings.dtype), "mean")


def anchor_centroids(anchors) -> CentroidSet:
    A = getattr(anchors, "anchors", anchors)
    return CentroidSet(np.asarray(A), "anchor")


def classify(queries: np.ndarray, centroids: CentroidSet | np.ndarray) -> np.ndarray:
    """argmax of cosine similarity; ties go to the lowest class index."""
    C = centroids.centroids if isinstance(centroids, CentroidSet) else centroids
    s = T.cosine_sim(np.atleast_2d(queries), C)
    return np.argmax(s, axis=1)


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean())


@dataclass
class ClusterReport:
    inter: float
    intra: float
    silhouette: float

    def to_dict(self) -> dict:
        return asdict(self)


def cluster_metrics(embeddings: np.ndarray, labels) -> ClusterReport:
    """Cluster quality under cosine distance 1 - s.

    intra: per-sample mean distance to the other samples of its class,
    averaged over samples (0 for singletons). inter: mean pairwise distance
    between class-mean centroids. silhouette: mean of (b - a) / max(a, b),
    with singleton samples contributing 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UsageError("cluster metrics need at least two classes")
    d = 1.0 - T.cosine_sim(embeddings, embeddings)
    m = len(labels)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(m, dtype=bool)

    peers = (same & not_self).sum(axis=1)
    a = np.where(peers > 0, (d * (same & not_self)).sum(axis=1) / np.maximum(peers, 1), 0.0)

    per_class = np.stack([d[:, labels == c].mean(axis=1) for c in classes], axis=1)
    own = labels[:, None] == classes[None, :]
    b = np.where(own, np.inf, per_class).min(axis=1)
    denom = np.maximum(a, b)
    sil = np.where((peers > 0) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)

    cents = compute_centroids(embeddings, np.searchsorted(classes, labels), len(classes)).centroids
    cd = 1.0 - T.cosine_sim(cents, cents)
    iu = np.triu_indices(len(classes), k=1)
    return ClusterReport(inter=float(cd[iu].mean()), intra=float(a.mean()), silhouette=float(sil.mean()))
