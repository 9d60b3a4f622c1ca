"""Training regimes: classification-only, contrastive pre-training, multi-task
fine-tuning and their combinations, with per-epoch validation selection.

A run directory holds::

    config.used            resolved configuration (key = value)
    pt_epoch_<n>.ckpt      contrastive pre-training checkpoints, if any
    epoch_<n>.ckpt         fine-tuning checkpoints
    best.ckpt              checkpoint of the selected final model
    metrics.tsv            epoch, phase, train_ce, train_ctr, val_loss
    test_report.tsv        metric, mean, std
    confusion.tsv          test confusion matrix
    embeddings.slv1        pooled test embeddings, one "frame" per utterance
    embeddings.labels      id|region|city per embedding row
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import optimizer as opt
from .config import format_config
from .contrastive import ContrastiveParams, LossKind, contrastive_objective
from .dataset import CorpusManifest, DatasetError, Utterance, load_batch, write_features
from .encoder import (
    PARAM_NAMES,
    EncoderParams,
    backward,
    cross_entropy_batch,
    forward_batch,
    init_params,
    predict,
    save_checkpoint,
)
from .evaluation import EvalReport, aggregate, evaluate, write_confusion_tsv, write_report_tsv

log = logging.getLogger(__name__)

HEAD_PARAMS = ("head_W", "head_b")
ENCODER_PARAMS = tuple(n for n in PARAM_NAMES if n not in HEAD_PARAMS)

# Seed-stream tags so each phase shuffles identically whatever ran before it.
_PT_STREAM, _FT_STREAM, _VAL_STREAM = 101, 102, 103


class ConfigError(ValueError):
    pass


class Regime(str, Enum):
    CLF_ONLY = "clf"
    CTR_PT_ONLY = "ctr-pt"
    CTR_FT = "ctr-ft"
    CTR_PT_THEN_CLF = "ctr-pt+clf"
    CTR_PT_THEN_CTR_FT = "ctr-pt+ctr-ft"

    @property
    def pretrains(self) -> bool:
        return self in (Regime.CTR_PT_ONLY, Regime.CTR_PT_THEN_CLF, Regime.CTR_PT_THEN_CTR_FT)

    @property
    def finetunes(self) -> bool:
        return self is not Regime.CTR_PT_ONLY

    @property
    def multitask(self) -> bool:
        return self in (Regime.CTR_FT, Regime.CTR_PT_THEN_CTR_FT)

    def table_flags(self) -> tuple[bool, bool, bool]:
        """(Ctr-PT, Ctr-FT, Clf-FT) columns."""
        return self.pretrains, self.multitask, self.finetunes


@dataclass(frozen=True)
class RunConfig:
    regime: Regime = Regime.CLF_ONLY
    loss: LossKind = LossKind.MS
    ctr_weight: float = 1.0
    contrastive: ContrastiveParams = ContrastiveParams()
    batch_size: int = 32
    max_epochs: int = 10
    seeds: tuple[int, ...] = (1, 2, 3)
    hidden_dim: int = 64
    peak_lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def uses_contrastive(self) -> bool:
        return self.regime.pretrains or (self.regime.multitask and self.ctr_weight > 0)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.uses_contrastive and self.batch_size < 2:
            raise ConfigError("contrastive requires batch >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.ctr_weight < 0:
            raise ConfigError("ctr_weight must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        try:
            self.contrastive.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer_hyper(self) -> dict:
        return dict(peak_lr=self.peak_lr, weight_decay=self.weight_decay, beta1=self.beta1,
                    beta2=self.beta2, eps=self.eps, warmup_fraction=self.warmup_fraction)

    def as_dict(self) -> dict:
        out = {
            "regime": self.regime.value,
            "loss": self.loss.value,
            "ctr_weight": self.ctr_weight,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "seeds": ",".join(str(s) for s in self.seeds),
            "hidden_dim": self.hidden_dim,
        }
        out.update(self.optimizer_hyper())
        out.update({k: getattr(self.contrastive, k) for k in self.contrastive.__dataclass_fields__})
        return out


@dataclass
class SplitData:
    ids: list[str]
    frames: list[np.ndarray]
    labels: np.ndarray
    regions: list[str]
    cities: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_utterances(cls, utterances: Sequence[Utterance], regions: Sequence[str]) -> "SplitData":
        index = {r: i for i, r in enumerate(regions)}
        return cls(
            ids=[u.id for u in utterances],
            frames=[u.frames for u in utterances],
            labels=np.array([index[u.region] for u in utterances], dtype=np.int64),
            regions=list(regions),
            cities=[u.city for u in utterances],
        )


@dataclass
class CorpusData:
    train: SplitData
    val: SplitData
    test: SplitData
    regions: list[str]
    feature_dim: int


def load_corpus_data(manifest: CorpusManifest) -> CorpusData:
    """Load all three splits into memory; regions are those of the train split."""
    train_ids = manifest.split_ids("train")
    regions = sorted({manifest.entry(i).region for i in train_ids})
    splits = {}
    for name in ("train", "val", "test"):
        ids = manifest.split_ids(name)
        if not ids:
            raise DatasetError(f"split {name!r} is empty")
        splits[name] = SplitData.from_utterances(load_batch(manifest, ids), regions)
    return CorpusData(splits["train"], splits["val"], splits["test"], regions, manifest.feature_dim)


def corpus_data_in_memory(utterances: Sequence[Utterance], manifest: CorpusManifest) -> CorpusData:
    """Like ``load_corpus_data`` but from already-sampled utterances (no disk I/O)."""
    by_split: dict[str, list[Utterance]] = {"train": [], "val": [], "test": []}
    for u in utterances:
        split = manifest.splits.get(u.city)
        if split is not None:
            by_split[split].append(u)
    regions = sorted({u.region for u in by_split["train"]})
    parts = {k: SplitData.from_utterances(v, regions) for k, v in by_split.items()}
    return CorpusData(parts["train"], parts["val"], parts["test"], regions, manifest.feature_dim)


@dataclass
class PhaseSpec:
    name: str  # "pt" or "ft"
    use_ce: bool
    use_ctr: bool

    @property
    def trainable(self) -> tuple[str, ...]:
        return PARAM_NAMES if self.use_ce else ENCODER_PARAMS


@dataclass
class BatchLog:
    size: int
    ce: float
    ctr: float
    total: float


@dataclass
class EpochStats:
    train_ce: float
    train_ctr: float
    train_total: float
    batches: list[BatchLog]
    skipped: int = 0


def phase_specs(cfg: RunConfig) -> list[PhaseSpec]:
    phases = []
    if cfg.regime.pretrains:
        phases.append(PhaseSpec("pt", use_ce=False, use_ctr=True))
    if cfg.regime.finetunes:
        phases.append(PhaseSpec("ft", use_ce=True, use_ctr=cfg.regime.multitask and cfg.ctr_weight > 0))
    return phases


def batch_loss(params: EncoderParams, frames: Sequence[np.ndarray], labels: np.ndarray,
               phase: PhaseSpec, cfg: RunConfig, with_grads: bool = True):
    """Forward one batch; returns ``(ce, ctr, total, grads)``."""
    _, pooled, logits, cache = forward_batch(params, frames)
    ce = ctr = 0.0
    g_logits = g_pooled = None
    w = cfg.ctr_weight if phase.use_ce else 1.0
    if phase.use_ce:
        ce, g_logits = cross_entropy_batch(logits, labels)
    if phase.use_ctr:
        out = contrastive_objective(cfg.loss, pooled, labels, cfg.contrastive)
        ctr = out.value
        g_pooled = w * out.grad
    total = ce + w * ctr
    grads = backward(cache, g_pooled, g_logits) if with_grads else None
    return ce, ctr, total, grads


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(params: EncoderParams, state: opt.AdamWState, data: SplitData, phase: PhaseSpec,
                cfg: RunConfig, rng: np.random.Generator) -> EpochStats:
    """One pass over ``data`` in a seeded shuffled order, one optimizer step per batch.

    The classifier head is only updated in phases that use cross-entropy.
    """
    if len(data) == 0:
        raise DatasetError("cannot train on an empty split")
    order = rng.permutation(len(data))
    logs: list[BatchLog] = []
    skipped = 0
    for idx in _batches(len(data), cfg.batch_size, order):
        if phase.use_ctr and len(idx) < 2:
            skipped += 1
            log.warning("skipping batch of size %d: contrastive loss needs >= 2 samples", len(idx))
            continue
        frames = [data.frames[i] for i in idx]
        ce, ctr, total, grads = batch_loss(params, frames, data.labels[idx], phase, cfg)
        arrays = params.arrays()
        opt.step({k: arrays[k] for k in phase.trainable}, {k: grads[k] for k in phase.trainable}, state)
        params.touch()
        logs.append(BatchLog(len(idx), ce, ctr, total))
    if not logs:
        return EpochStats(0.0, 0.0, 0.0, logs, skipped)
    sizes = np.array([b.size for b in logs], dtype=np.float64)
    wmean = lambda vals: float(np.dot(sizes, vals) / sizes.sum())
    return EpochStats(
        train_ce=wmean([b.ce for b in logs]),
        train_ctr=wmean([b.ctr for b in logs]),
        train_total=wmean([b.total for b in logs]),
        batches=logs,
        skipped=skipped,
    )


def validation_loss(params: EncoderParams, data: SplitData, phase: PhaseSpec, cfg: RunConfig,
                    order: np.ndarray) -> float:
    """Size-weighted mean of the phase's total loss over fixed validation batches."""
    totals, sizes = [], []
    for idx in _batches(len(data), cfg.batch_size, order):
        if phase.use_ctr and len(idx) < 2:
            continue
        frames = [data.frames[i] for i in idx]
        _, _, total, _ = batch_loss(params, frames, data.labels[idx], phase, cfg, with_grads=False)
        totals.append(total)
        sizes.append(len(idx))
    if not totals:
        raise DatasetError("validation split produced no usable batch")
    return float(np.dot(sizes, totals) / np.sum(sizes))


def select_best(val_losses: Sequence[float], checkpoints: Sequence):
    """Checkpoint with the lowest validation loss; the earliest wins ties."""
    if not val_losses:
        raise ValueError("no completed epoch to select from")
    return checkpoints[int(np.argmin(np.asarray(val_losses)))]


@dataclass
class Snapshot:
    epoch: int
    params: EncoderParams
    state: opt.AdamWState


@dataclass
class MetricRow:
    epoch: int
    phase: str
    train_ce: float
    train_ctr: float
    val_loss: float


def _copy_state(state: opt.AdamWState) -> opt.AdamWState:
    return replace(state, m={k: v.copy() for k, v in state.m.items()},
                   v={k: v.copy() for k, v in state.v.items()})


def run_phase(params: EncoderParams, data: CorpusData, phase: PhaseSpec, cfg: RunConfig, seed: int,
              run_dir: Path | None = None):
    """Train ``params`` for max_epochs and return ``(best Snapshot, metric rows, epoch stats)``."""
    stream = _PT_STREAM if phase.name == "pt" else _FT_STREAM
    rng = np.random.default_rng([seed, stream])
    val_order = np.random.default_rng([seed, _VAL_STREAM]).permutation(len(data.val))
    n_batches = sum(
        1 for idx in _batches(len(data.train), cfg.batch_size, np.arange(len(data.train)))
        if not (phase.use_ctr and len(idx) < 2)
    )
    arrays = params.arrays()
    state = opt.init_state({k: arrays[k] for k in phase.trainable}, cfg.max_epochs * n_batches,
                           **cfg.optimizer_hyper())
    prefix = "pt_epoch" if phase.name == "pt" else "epoch"
    snapshots, val_losses, rows, stats = [], [], [], []
    for epoch in range(1, cfg.max_epochs + 1):
        st = train_epoch(params, state, data.train, phase, cfg, rng)
        val = validation_loss(params, data.val, phase, cfg, val_order)
        snap = Snapshot(epoch, params.copy(), _copy_state(state))
        snapshots.append(snap)
        val_losses.append(val)
        stats.append(st)
        rows.append(MetricRow(epoch, phase.name, st.train_ce, st.train_ctr, val))
        log.info("seed %d %s epoch %d: ce=%.4f ctr=%.4f val=%.4f", seed, phase.name, epoch,
                 st.train_ce, st.train_ctr, val)
        if run_dir is not None:
            save_checkpoint(run_dir / f"{prefix}_{epoch}.ckpt", snap.params, _full_state(snap))
    best = select_best(val_losses, snapshots)
    return best, rows, stats


def _full_state(snap: Snapshot) -> opt.AdamWState:
    """Optimizer state over all parameters; frozen ones get zero moments."""
    arrays = snap.params.arrays()
    st = _copy_state(snap.state)
    for name in PARAM_NAMES:
        st.m.setdefault(name, np.zeros_like(arrays[name]))
        st.v.setdefault(name, np.zeros_like(arrays[name]))
    st.m = {k: st.m[k] for k in PARAM_NAMES}
    st.v = {k: st.v[k] for k in PARAM_NAMES}
    return st


@dataclass
class RunResult:
    seed: int
    params: EncoderParams
    report: EvalReport
    embeddings: np.ndarray
    metrics: list[MetricRow]
    pretrained: EncoderParams | None = None


def run_regime(cfg: RunConfig, data: CorpusData, seed: int, run_dir: str | Path | None = None,
               init: EncoderParams | None = None, config_text: str | None = None) -> RunResult:
    """Run every phase of ``cfg.regime`` for one seed and evaluate on the test split.

    ``init`` replaces the seeded initialization (used to start a
    classification run from a pre-trained encoder).
    """
    cfg.validate()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        text = config_text if config_text is not None else format_config({**cfg.as_dict(), "seed": seed})
        (run_dir / "config.used").write_text(text, encoding="utf-8")

    params = init.copy() if init is not None else init_params(
        data.feature_dim, cfg.hidden_dim, len(data.regions), seed)
    rows: list[MetricRow] = []
    pretrained = None
    best = None
    for phase in phase_specs(cfg):
        best, phase_rows, _ = run_phase(params, data, phase, cfg, seed, run_dir)
        rows.extend(phase_rows)
        params = best.params.copy()
        if phase.name == "pt":
            pretrained = params.copy()

    report = evaluate(params, data.test.frames, data.test.labels, data.regions)
    embeddings, _ = predict(params, data.test.frames)
    result = RunResult(seed, params, report, embeddings, rows, pretrained)
    if run_dir is not None:
        write_run_outputs(run_dir, result, best, data)
    return result


def write_run_outputs(run_dir: Path, result: RunResult, best: Snapshot, data: CorpusData) -> None:
    save_checkpoint(run_dir / "best.ckpt", best.params, _full_state(best))
    lines = ["epoch\tphase\ttrain_ce\ttrain_ctr\tval_loss"]
    for r in result.metrics:
        lines.append(f"{r.epoch}\t{r.phase}\t{r.train_ce:.10g}\t{r.train_ctr:.10g}\t{r.val_loss:.10g}")
    (run_dir / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_report_tsv(result.report, run_dir / "test_report.tsv")
    write_confusion_tsv(result.report.confusion, run_dir / "confusion.tsv")
    write_features(run_dir / "embeddings.slv1", result.embeddings)
    regions = data.regions
    label_lines = [f"#F={result.embeddings.shape[1]}"]
    for uid, lab, city in zip(data.test.ids, data.test.labels, data.test.cities):
        label_lines.append(f"{uid}|{regions[lab]}|{city}")
    (run_dir / "embeddings.labels").write_text("\n".join(label_lines) + "\n", encoding="utf-8")


def run_seeds(cfg: RunConfig, data: CorpusData, out_dir: str | Path | None = None,
              config_text: str | None = None) -> tuple[list[RunResult], EvalReport]:
    """One run per seed (``seed_<s>`` subdirectories) plus the aggregated test report."""
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for seed in cfg.seeds:
        run_dir = out / f"seed_{seed}" if out is not None else None
        text = None if config_text is None else config_text + f"seed = {seed}\n"
        results.append(run_regime(cfg, data, seed, run_dir, config_text=text))
    agg = aggregate([r.report for r in results])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config_text is not None:
            (out / "config.used").write_text(config_text, encoding="utf-8")
        else:
            (out / "config.used").write_text(format_config(cfg.as_dict()), encoding="utf-8")
        write_report_tsv(agg, out / "test_report.tsv")
        write_confusion_tsv(agg.confusion, out / "confusion.tsv")
    return results, agg


def train_accuracy(params: EncoderParams, data: SplitData) -> float:
    _, logits = predict(params, data.frames)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))
