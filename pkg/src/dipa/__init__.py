"""Few-shot adaptation of a frozen ViT with scale/shift adapters and proxy anchors."""

from .adapter import AdapterInit, AdapterSet, attach, count_params, param_report
from .backbone import PRESETS, BackboneConfig, forward, fuse_features, init_random_weights
from .classifier import classify, cluster_metrics, compute_centroids
from .episodes import Episode, GaussianTaskSpec, SamplerConfig, aggregate, make_synthetic_task, sample_episode
from .objective import AnchorSet, LossParams, ncc_loss, proxy_anchor_loss
from .tensor import Rng
from .trainer import FinetuneConfig, finetune

__version__ = "0.1.0"

__all__ = [
    "AdapterInit", "AdapterSet", "AnchorSet", "BackboneConfig", "Episode", "FinetuneConfig",
    "GaussianTaskSpec", "LossParams", "PRESETS", "Rng", "SamplerConfig", "aggregate", "attach",
    "classify", "cluster_metrics", "compute_centroids", "count_params", "finetune", "forward",
    "fuse_features", "init_random_weights", "make_synthetic_task", "ncc_loss", "param_report",
    "proxy_anchor_loss", "sample_episode",
]
