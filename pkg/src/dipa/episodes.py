"""Few-shot episodes: pool sampling, synthetic tasks, and result aggregation.

The sampler here is a plain uniform one (uniform way, uniform per-class
shots, fixed queries per class). It is not the hierarchy-aware Meta-Dataset
sampler, so numbers it produces are not comparable with Meta-Dataset tables.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, UsageError


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    shots: list
    seed: int = 0
    support_ids: np.ndarray | None = None
    query_ids: np.ndarray | None = None

    @property
    def n_support(self) -> int:
        return len(self.support_y)

    @property
    def n_query(self) -> int:
        return len(self.query_y)


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "varying"  # "varying" (way and shots uniform) | "fixed"
    n_way: int = 5
    k_shot: int = 5
    way_min: int = 5
    way_max: int = 50
    shot_min: int = 2
    shot_max: int = 10
    queries_per_class: int = 10

    def __post_init__(self):
        if self.mode not in ("varying", "fixed"):
            raise UsageError("sampler mode must be 'varying' or 'fixed'")
        if self.mode == "fixed" and (self.n_way < 1 or self.k_shot < 1):
            raise UsageError("fixed mode needs n_way >= 1 and k_shot >= 1")
        if self.mode == "varying" and (self.way_min > self.way_max or self.shot_min > self.shot_max or self.shot_min < 1):
            raise UsageError("empty way or shot range")
        if self.queries_per_class < 1:
            raise UsageError("queries_per_class must be at least 1")

    @property
    def min_shots(self) -> int:
        return self.k_shot if self.mode == "fixed" else self.shot_min

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown sampler config keys: {sorted(unknown)}")
        return cls(**d)


class Pool:
    """A labelled sample pool held in memory.

    On disk: ``index.json`` is a list of ``{file, label, shape, dtype}``
    entries, each ``file`` a raw little-endian row-major tensor relative to
    the index directory.
    """

    def __init__(self, x: np.ndarray, labels, names=None):
        self.x = np.asarray(x)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.x) != len(self.labels):
            raise DataError("pool samples and labels disagree in length")
        self.names = list(names) if names is not None else [f"{i:06d}.bin" for i in range(len(self.labels))]
        self.classes = np.unique(self.labels)
        self._by_class = {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def __len__(self):
        return len(self.labels)

    def indices(self, cls: int) -> np.ndarray:
        return self._by_class[int(cls)]

    @classmethod
    def from_dir(cls, path) -> "Pool":
        try:
            with open(os.path.join(path, "index.json")) as fh:
                index = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"no index.json in {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"bad index.json: {exc}") from None
        xs, labels, names = [], [], []
        for entry in index:
            try:
                name, label, shape, code = entry["file"], int(entry["label"]), tuple(entry["shape"]), entry["dtype"]
            except (KeyError, TypeError, ValueError):
                raise DataError(f"malformed pool index entry {entry!r}") from None
            le = {"f32": "<f4", "f64": "<f8"}.get(code)
            if le is None:
                raise DataError(f"unknown dtype {code!r} in pool index")
            raw = np.fromfile(os.path.join(path, name), dtype=le)
            if raw.size != int(np.prod(shape)):
                raise DataError(f"{name}: {raw.size} elements, index says shape {list(shape)}")
            xs.append(raw.reshape(shape).astype(T.DTYPES[code]))
            labels.append(label)
            names.append(name)
        if not xs:
            raise DataError("empty pool")
        if len({x.shape for x in xs}) != 1:
            raise DataError("pool samples have differing shapes")
        return cls(np.stack(xs), labels, names)

    def to_dir(self, path) -> None:
        os.makedirs(path, exist_ok=True)
        code = T.dtype_name(self.x.dtype)
        le = {"f32": "<f4", "f64": "<f8"}[code]
        index = []
        for name, x, y in zip(self.names, self.x, self.labels):
            np.ascontiguousarray(x, dtype=le).tofile(os.path.join(path, name))
            index.append({"file": name, "label": int(y), "shape": list(x.shape), "dtype": code})
        with open(os.path.join(path, "index.json"), "w") as fh:
            json.dump(index, fh, indent=1)


def sample_episode(pool: Pool, config: SamplerConfig, rng: T.Rng) -> Episode:
    """Draw classes, then per-class shots and queries, without replacement."""
    n_classes = len(pool.classes)
    q = config.queries_per_class
    if config.mode == "fixed":
        n_way = config.n_way
        if n_classes < n_way:
            raise DataError(f"pool has {n_classes} classes, episode needs {n_way}")
    else:
        hi = min(config.way_max, n_classes)
        if hi < config.way_min:
            raise DataError(f"pool has {n_classes} classes, sampler needs at least {config.way_min}")
        n_way = int(rng.integers(config.way_min, hi))
    chosen = pool.classes[np.sort(rng.choice(n_classes, n_way))]

    sx, sy, qx, qy, sid, qid, shots = [], [], [], [], [], [], []
    for new_label, c in enumerate(chosen):
        idx = pool.indices(c)
        if config.mode == "fixed":
            k = config.k_shot
        else:
            k = int(rng.integers(config.shot_min, config.shot_max))
        if len(idx) < k + q:
            raise DataError(f"class {int(c)} has {len(idx)} samples, needs {k + q}")
        picked = idx[rng.permutation(len(idx))[: k + q]]
        sid.append(picked[:k])
        qid.append(picked[k:])
        sy.append(np.full(k, new_label))
        qy.append(np.full(q, new_label))
        shots.append(k)
    sid, qid = np.concatenate(sid), np.concatenate(qid)
    return Episode(
        pool.x[sid], np.concatenate(sy), pool.x[qid], np.concatenate(qy),
        n_way, shots, rng.seed, sid, qid,
    )


@dataclass(frozen=True)
class GaussianTaskSpec:
    """Isotropic Gaussian classes in image space seen through a fixed domain shift.

    Each class ``c`` gets a random prototype image ``mu_c`` (entries N(0, sep^2));
    samples are ``mu_c + noise * eps``. The shift (seeded by ``shift_seed`` and
    shared by every episode) then adds a per-sample nuisance pattern drawn from
    a fixed ``nuisance_rank``-dimensional image subspace with scale
    ``shift_strength``, and applies a fixed per-channel gain and offset. Class
    identity is independent of the nuisance, so the Bayes-optimal classifier
    only depends on the unshifted part.
    """

    n_way: int = 5
    k_shot: int = 5
    queries_per_class: int = 10
    channels: int = 3
    image_size: int = 8
    sep: float = 1.0
    noise: float = 0.5
    shift_strength: float = 0.0
    nuisance_rank: int = 4
    shift_seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.queries_per_class < 1:
            raise UsageError("synthetic task needs n_way >= 2, k_shot >= 1 and queries >= 1")
        if self.sep <= 0 or self.noise < 0 or self.shift_strength < 0 or self.nuisance_rank < 1:
            raise UsageError("degenerate synthetic task spec")

    @property
    def image_shape(self) -> tuple:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GaussianTaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def domain_shift(spec: GaussianTaskSpec):
    """The fixed (basis, channel gain, channel offset) of the shifted domain."""
    rng = T.Rng(spec.shift_seed, (0x5817F,))
    dim = int(np.prod(spec.image_shape))
    basis = rng.normal((spec.nuisance_rank, dim)) / math.sqrt(dim)
    gain = np.exp(rng.normal(spec.channels, std=0.5))
    offset = rng.normal(spec.channels, std=1.0)
    return basis, gain, offset


def _shift(x: np.ndarray, spec: GaussianTaskSpec, rng: T.Rng) -> np.ndarray:
    if spec.shift_strength == 0:
        return x
    basis, gain, offset = domain_shift(spec)
    n = len(x)
    coef = rng.normal((n, spec.nuisance_rank), std=spec.shift_strength)
    dim = basis.shape[1]
    x = x + (coef @ basis * math.sqrt(dim)).reshape(x.shape)
    return x * gain[None, :, None, None] + offset[None, :, None, None]


def make_synthetic_task(spec: GaussianTaskSpec, rng: T.Rng) -> Episode:
    n, k, q = spec.n_way, spec.k_shot, spec.queries_per_class
    shape = spec.image_shape
    means = rng.normal((n, *shape), std=spec.sep)
    sy = np.repeat(np.arange(n), k)
    qy = np.repeat(np.arange(n), q)
    sx = means[sy] + rng.normal((n * k, *shape), std=spec.noise) if spec.noise > 0 else means[sy].copy()
    qx = means[qy] + rng.normal((n * q, *shape), std=spec.noise) if spec.noise > 0 else means[qy].copy()
    sx = _shift(sx, spec, rng)
    qx = _shift(qx, spec, rng)
    return Episode(sx, sy, qx, qy, n, [k] * n, rng.seed,
                   np.arange(n * k), np.arange(n * k, n * k + n * q))


@dataclass
class EpisodeResult:
    episode_id: int
    seed: int
    n_way: int
    shots: list
    accuracy: float
    loss_first: float | None = None
    loss_last: float | None = None
    silhouette: float | None = None
    wall_ms: float | None = None
    accuracy_anchor: float | None = None
    cluster: dict | None = None

    def to_json(self) -> str:
        d = {
            "episode_id": self.episode_id,
            "seed": self.seed,
            "n_way": self.n_way,
            "shots": list(self.shots),
            "accuracy": self.accuracy,
            "loss_first": self.loss_first,
            "loss_last": self.loss_last,
            "silhouette": self.silhouette,
            "wall_ms": self.wall_ms,
            "accuracy_anchor": self.accuracy_anchor,
            "cluster": self.cluster,
        }
        return json.dumps(d, sort_keys=False)


@dataclass
class SummaryStats:
    mean: float
    std: float
    ci95: float
    n: int
    single_episode: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(results) -> SummaryStats:
    """Mean accuracy with a normal-approximation 95% CI, 1.96 * s / sqrt(n).

    ``s`` is the sample standard deviation (n - 1 denominator). A single
    episode gives CI 0 and sets ``single_episode``.
    """
    acc = np.array([r.accuracy if isinstance(r, EpisodeResult) else float(r) for r in results], dtype=np.float64)
    n = len(acc)
    if n == 0:
        raise UsageError("cannot aggregate an empty result list")
    mean = float(math.fsum(acc) / n)
    if n == 1:
        warnings.warn("single episode: confidence interval reported as 0", stacklevel=2)
        return SummaryStats(mean, 0.0, 0.0, 1, True)
    std = math.sqrt(math.fsum((a - mean) ** 2 for a in acc) / (n - 1))
    return SummaryStats(mean, std, 1.96 * std / math.sqrt(n), n)
