"""Supervised contrastive metric learning for region identification from frame features."""

from .analysis import Projection, TsneConfig, cluster_quality, render_confusion, render_scatter, tsne
from .contrastive import ContrastiveParams, LossKind, LossOutput, MinedPairs, mine, ms_loss, sc_loss, tm_loss
from .dataset import (
    CorpusManifest,
    SyntheticConfig,
    Utterance,
    build_splits,
    generate_corpus,
    load_batch,
    read_manifest,
)
from .encoder import EncoderParams, backward, cross_entropy, forward, init_params, l2_normalize
from .evaluation import ConfusionMatrix, EvalReport, aggregate, evaluate
from .optimizer import AdamWState, lr_at, step
from .training import Regime, RunConfig, run_regime, select_best, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "ConfusionMatrix",
    "ContrastiveParams",
    "CorpusManifest",
    "EncoderParams",
    "EvalReport",
    "LossKind",
    "LossOutput",
    "MinedPairs",
    "Projection",
    "Regime",
    "RunConfig",
    "SyntheticConfig",
    "TsneConfig",
    "Utterance",
    "aggregate",
    "backward",
    "build_splits",
    "cluster_quality",
    "cross_entropy",
    "evaluate",
    "forward",
    "generate_corpus",
    "init_params",
    "l2_normalize",
    "load_batch",
    "lr_at",
    "mine",
    "ms_loss",
    "read_manifest",
    "render_confusion",
    "render_scatter",
    "run_regime",
    "sc_loss",
    "select_best",
    "step",
    "tm_loss",
    "train_epoch",
    "tsne",
]
