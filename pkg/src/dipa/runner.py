"""Episode evaluation and the episode-parallel runner."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .backbone import BackboneConfig, init_random_weights, load_config, validate_weights
from .classifier import accuracy, anchor_centroids, classify, cluster_metrics, compute_centroids
from .episodes import (Episode, EpisodeResult, GaussianTaskSpec, Pool, SamplerConfig, SummaryStats, aggregate,
                       make_synthetic_task, sample_episode)
from .errors import DipaError, UsageError
from .trainer import FinetuneConfig, embed_images, finetune


@dataclass
class EpisodeOutcome:
    result: EpisodeResult
    support_embeddings: np.ndarray
    query_embeddings: np.ndarray


def evaluate_episode(config: BackboneConfig, weights, fcfg: FinetuneConfig, episode: Episode,
                     episode_id: int = 0, timing: bool = False) -> EpisodeOutcome:
    """Fine-tune on the support set, then classify queries by nearest centroid.

    ``accuracy`` uses class-mean centroids of the adapted support embeddings;
    ``accuracy_anchor`` uses the learned anchors instead. Cluster metrics are
    computed on the adapted query embeddings.
    """
    t0 = time.perf_counter()
    fit = finetune(config, weights, fcfg, episode.support_x, episode.support_y, episode.n_way)
    dtype = weights["pos_embed"].dtype
    s_emb = embed_images(config, weights, episode.support_x.astype(dtype), fit.adapters, fcfg.d_f)
    q_emb = embed_images(config, weights, episode.query_x.astype(dtype), fit.adapters, fcfg.d_f)
    cents = compute_centroids(s_emb, episode.support_y, episode.n_way)
    acc = accuracy(classify(q_emb, cents), episode.query_y)
    acc_anchor = accuracy(classify(q_emb, anchor_centroids(fit.anchors)), episode.query_y)
    report = cluster_metrics(q_emb, episode.query_y)
    wall = (time.perf_counter() - t0) * 1000.0 if timing else None
    result = EpisodeResult(
        episode_id=episode_id,
        seed=episode.seed,
        n_way=episode.n_way,
        shots=[int(k) for k in episode.shots],
        accuracy=acc,
        loss_first=float(fit.loss_trace[0]),
        loss_last=float(fit.loss_trace[-1]),
        silhouette=report.silhouette,
        wall_ms=wall,
        accuracy_anchor=acc_anchor,
        cluster=report.to_dict(),
    )
    return EpisodeOutcome(result, s_emb, q_emb)


def worker_count(requested: int | None) -> int:
    """Requested workers, capped by DIPA_THREADS when set."""
    n = requested or 1
    cap = os.environ.get("DIPA_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# -- experiment runs -------------------------------------------------------------

PRESET_DEPTHS = {"seen": 7, "unseen": 9}


@dataclass
class RunConfig:
    """Everything a ``run`` needs, with every default materialized."""

    backbone: dict = field(default_factory=lambda: BackboneConfig().to_dict())
    finetune: dict = field(default_factory=lambda: FinetuneConfig().to_dict())
    sampler: dict = field(default_factory=lambda: SamplerConfig().to_dict())
    synthetic: dict | None = None
    pool: str | None = None
    weights: str | None = None
    weights_seed: int = 0
    weights_scheme: str = "trunc_normal"
    dtype: str = "f32"
    episodes: int = 600
    seed: int = 0
    workers: int = 1
    timing: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)


def resolve_config(raw: dict | None = None, preset: str | None = None, **overrides) -> RunConfig:
    """Merge a (possibly partial) config dict with overrides and validate it.

    ``overrides`` keys are RunConfig fields or FinetuneConfig fields; ``None``
    values are ignored. ``preset`` ("seen"/"unseen") supplies the tuning depth
    when none is given explicitly. Default depths are clamped to the backbone
    depth; explicit ones are validated against it.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown run config keys: {sorted(unknown)}")
    ft = dict(raw.get("finetune") or {})
    ft_fields = set(FinetuneConfig.__dataclass_fields__)
    for key, val in overrides.items():
        if val is None:
            continue
        if key in ft_fields:
            ft[key] = val
        elif key in RunConfig.__dataclass_fields__:
            raw[key] = val
        else:
            raise UsageError(f"unknown override {key!r}")
    bconf = load_config(raw.get("backbone", "vit-small"))
    if "d_t" not in ft:
        if preset is not None and preset not in PRESET_DEPTHS:
            raise UsageError(f"preset must be one of {sorted(PRESET_DEPTHS)}")
        ft["d_t"] = min(PRESET_DEPTHS[preset or "unseen"], bconf.depth)
    if "d_f" not in ft:
        ft["d_f"] = min(FinetuneConfig.d_f, bconf.depth)
    fcfg = FinetuneConfig.from_dict(ft)
    if fcfg.d_t > bconf.depth or fcfg.d_f > bconf.depth:
        raise UsageError(f"d_t={fcfg.d_t} / d_f={fcfg.d_f} exceed backbone depth {bconf.depth}")
    sampler = SamplerConfig.from_dict(raw.get("sampler") or {})
    synthetic = raw.get("synthetic")
    if synthetic is not None:
        synthetic = {"channels": bconf.in_chans, "image_size": bconf.image_size, **synthetic}
        spec = GaussianTaskSpec.from_dict(synthetic)
        synthetic = spec.to_dict()
        min_shots = spec.k_shot
    else:
        min_shots = sampler.min_shots
    if synthetic is None and raw.get("pool") is None:
        raise UsageError("a run needs either a pool directory or a synthetic task spec")
    if fcfg.loss == "proxy_anchor" and min_shots < 2:
        raise UsageError("proxy-anchor fine-tuning needs at least two support samples per class")
    cfg = RunConfig(
        backbone=bconf.to_dict(),
        finetune=fcfg.to_dict(),
        sampler=sampler.to_dict(),
        synthetic=synthetic,
        pool=raw.get("pool"),
        weights=raw.get("weights"),
        weights_seed=int(raw.get("weights_seed", 0)),
        weights_scheme=raw.get("weights_scheme", "trunc_normal"),
        dtype=raw.get("dtype", "f32"),
        episodes=int(raw.get("episodes", 600)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        timing=bool(raw.get("timing", False)),
    )
    if cfg.episodes < 1:
        raise UsageError("episodes must be at least 1")
    T.dtype_of(cfg.dtype)
    return cfg


def episode_seed(run_seed: int, index: int) -> int:
    return T.Rng(run_seed, (index,)).next_u64() >> 1


def load_run_weights(cfg: RunConfig, config: BackboneConfig) -> dict:
    if cfg.weights is not None:
        weights = container.load(cfg.weights)
        validate_weights(config, weights)
        return weights
    return init_random_weights(config, T.Rng(cfg.weights_seed), cfg.weights_scheme, cfg.dtype)


_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)


def _run_one(index: int) -> EpisodeResult:
    s = _STATE
    seed = episode_seed(s["seed"], index)
    try:
        rng = T.Rng(seed)
        if s["synthetic"] is not None:
            episode = make_synthetic_task(s["synthetic"], rng)
        else:
            episode = sample_episode(s["pool"], s["sampler"], rng)
        fcfg = s["finetune"].with_(seed=seed % 2**32)
        return evaluate_episode(s["backbone"], s["weights"], fcfg, episode, index, s["timing"]).result
    except DipaError as exc:
        raise type(exc)(f"episode {index}: {exc}") from None


def run_experiment(cfg: RunConfig, out_dir) -> SummaryStats:
    """Run ``cfg.episodes`` episodes and write config.json, results.jsonl, summary.json.

    Episode ``i`` draws its task and fine-tuning seed from ``(cfg.seed, i)``
    only, so results do not depend on the worker count, and results.jsonl is
    written in episode order. Wall-clock numbers go to timing.json (and to
    ``wall_ms`` only when ``cfg.timing`` is set) to keep results.jsonl
    reproducible byte for byte.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    config = BackboneConfig.from_dict(cfg.backbone)
    state = {
        "seed": cfg.seed,
        "backbone": config,
        "weights": load_run_weights(cfg, config),
        "finetune": FinetuneConfig.from_dict(cfg.finetune),
        "sampler": SamplerConfig.from_dict(cfg.sampler),
        "synthetic": GaussianTaskSpec.from_dict(cfg.synthetic) if cfg.synthetic is not None else None,
        "pool": Pool.from_dir(cfg.pool) if cfg.synthetic is None else None,
        "timing": cfg.timing,
    }
    workers = worker_count(cfg.workers)
    t0 = time.perf_counter()
    results = []
    with open(os.path.join(out_dir, "results.jsonl"), "w") as fh:
        if workers <= 1:
            _init_worker(state)
            stream = map(_run_one, range(cfg.episodes))
            results = _drain(stream, fh)
        else:
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(state,)) as pool:
                results = _drain(pool.map(_run_one, range(cfg.episodes)), fh)
    stats = aggregate(results)
    summary = {
        **stats.to_dict(),
        "accuracy_anchor_mean": float(np.mean([r.accuracy_anchor for r in results])),
        "silhouette_mean": float(np.mean([r.silhouette for r in results])),
        "loss_first_mean": float(np.mean([r.loss_first for r in results])),
        "loss_last_mean": float(np.mean([r.loss_last for r in results])),
        "loss": state["finetune"].loss,
        "d_t": state["finetune"].d_t,
        "d_f": state["finetune"].d_f,
        "iterations": state["finetune"].iterations,
        "fused_dim": state["finetune"].d_f * config.embed_dim,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump({"wall_s": time.perf_counter() - t0, "workers": workers}, fh, indent=2)
    return stats


def _drain(stream, fh) -> list:
    out = []
    for res in stream:
        fh.write(res.to_json() + "\n")
        fh.flush()
        out.append(res)
    return out
