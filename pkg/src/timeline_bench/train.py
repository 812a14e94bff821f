"""Training and evaluation harness: Adam, fixed epochs, validation selection.

``tri_distill`` runs in two phases: a text-conditioned teacher is trained
(or supplied), frozen, and the student is trained on
``ce_weight * CE + distill_weight * L2(encoder-1 representations)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .data import ConfigError, Dataset, DimensionError, TimelineSample, order_videos_by_release, reorder
from .metrics import MetricsReport, ScoreConfig, postprocess_skip_empty, score_dataset
from .models import (
    ModelConfig,
    Params,
    collate,
    cross_entropy_loss,
    distillation_loss,
    forward,
    init_params,
    predict_batch,
)
from .numerics import Tensor

log = logging.getLogger(__name__)

LR_GRID = (0.01, 0.001, 0.0005)
DROPOUT_GRID = (0.0, 0.1, 0.25, 0.5)
# higher is better for these; distances are negated before comparison
SELECTION_METRICS = {
    "micro_agreement": ("micro", "agreement", 1),
    "macro_agreement": ("macro", "agreement", 1),
    "micro_precision": ("micro", "precision", 1),
    "micro_recall": ("micro", "recall", 1),
    "micro_hamming": ("micro", "hamming", -1),
    "micro_euclidean": ("micro", "euclidean", -1),
    "macro_hamming": ("macro", "hamming", -1),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    dropout_p: float = 0.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    selection_metric: str = "micro_agreement"
    lr_grid: tuple[float, ...] = LR_GRID
    dropout_grid: tuple[float, ...] = DROPOUT_GRID
    early_stopping_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr_grid or not self.dropout_grid:
            raise ConfigError("hyperparameter grids must be nonempty")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def model_config(self) -> ModelConfig:
        return replace(self.model, dropout_p=self.dropout_p)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["lr_grid"] = list(self.lr_grid)
        doc["dropout_grid"] = list(self.dropout_grid)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> TrainConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        kwargs = dict(doc)
        try:
            if "model" in kwargs:
                kwargs["model"] = ModelConfig.from_json(kwargs["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for key in ("lr_grid", "dropout_grid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class Checkpoint:
    model: ModelConfig
    embedding_dim: int
    params: dict[str, np.ndarray]

    def to_bytes(self) -> bytes:
        header = {"model": self.model.to_json(), "embedding_dim": self.embedding_dim}
        return nx.encode_params(self.params, header)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        params, header = nx.decode_params(blob)
        return cls(ModelConfig.from_json(header["model"]), int(header["embedding_dim"]), params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())

    def tensors(self) -> Params:
        return {k: Tensor(v) for k, v in self.params.items()}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_selection: float
    val_report: dict


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_selection: float = -math.inf
    diverged: bool = False
    wall_time_s: float = 0.0
    teacher: TrainReport | None = None

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_selection": self.best_selection,
            "diverged": self.diverged,
            "wall_time_s": self.wall_time_s,
            "epochs": [asdict(e) for e in self.epochs],
            "teacher": None if self.teacher is None else self.teacher.to_json(),
        }


def selection_value(report: MetricsReport, metric: str) -> float:
    block_name, field_name, sign = SELECTION_METRICS[metric]
    value = getattr(getattr(report, block_name), field_name)
    if value is None:
        return -math.inf
    return sign * float(value)


def _check_inputs(ds: Dataset, cfg: ModelConfig, what: str) -> None:
    if not ds.samples:
        raise ConfigError(f"{what} dataset is empty")
    if ds.metrics_only:
        raise DimensionError(f"{what} dataset has no video embeddings (metrics-only file)")
    if cfg.use_text and not ds.has_node_texts:
        raise DimensionError(f"{what} dataset lacks node_text_embeddings needed by the teacher")


def evaluate_params(
    params: Params,
    cfg: ModelConfig,
    ds: Dataset,
    sigma=0.5,
    postprocess: bool = True,
    batch_size: int = 32,
    threads: int = 1,
) -> MetricsReport:
    preds = {}
    for start in range(0, len(ds.samples), batch_size):
        chunk = ds.samples[start : start + batch_size]
        for s, p in zip(chunk, predict_batch(params, cfg, chunk)):
            preds[s.topic_id] = p
    return score_dataset(ds, preds, ScoreConfig(sigma), postprocess=postprocess, threads=threads)


def predict(ckpt: Checkpoint, ds: Dataset, postprocess: bool = True, batch_size: int = 32) -> dict[str, tuple[int, ...]]:
    _check_dim(ckpt, ds)
    params = ckpt.tensors()
    preds = {}
    for start in range(0, len(ds.samples), batch_size):
        chunk = ds.samples[start : start + batch_size]
        for s, p in zip(chunk, predict_batch(params, ckpt.model, chunk)):
            preds[s.topic_id] = postprocess_skip_empty(p) if postprocess else p
    return preds


def _check_dim(ckpt: Checkpoint, ds: Dataset) -> None:
    if ds.metrics_only:
        raise DimensionError("dataset has no video embeddings (metrics-only file)")
    if ds.embedding_dim != ckpt.embedding_dim:
        raise DimensionError(f"dataset embedding_dim {ds.embedding_dim} != checkpoint {ckpt.embedding_dim}")
    if ckpt.model.use_text and not ds.has_node_texts:
        raise DimensionError("text-conditioned checkpoint needs node_text_embeddings in the dataset")


def evaluate(ckpt: Checkpoint, ds: Dataset, sigma=0.5, postprocess: bool = True, threads: int = 1) -> MetricsReport:
    """Eval-mode forward, argmax, skip empty nodes, then score."""
    _check_dim(ckpt, ds)
    return evaluate_params(ckpt.tensors(), ckpt.model, ds, sigma, postprocess, threads=threads)


def _release_ordered(ds: Dataset) -> list[TimelineSample]:
    return [reorder(s, order_videos_by_release(s)) for s in ds.samples]


def train_teacher(train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> tuple[Checkpoint, TrainReport]:
    """Train the text-conditioned Tri-Transformer used as distillation teacher."""
    _check_inputs(train_ds, replace(cfg.model, model_kind="tri"), "train")
    if not train_ds.has_node_texts:
        raise DimensionError("teacher training needs node_text_embeddings")
    d_text = len(train_ds.samples[0].node_text_embeddings[0])
    model = replace(cfg.model, model_kind="tri", use_text=True, d_text=d_text)
    return train(train_ds, val_ds, replace(cfg, model=model))


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    teacher: Checkpoint | None = None,
) -> tuple[Checkpoint, TrainReport]:
    """Train one model; returns the validation-best checkpoint and a report."""
    started = time.perf_counter()
    model = cfg.model_config()
    _check_inputs(train_ds, model, "train")
    _check_inputs(val_ds, model, "validation")
    if val_ds.embedding_dim != train_ds.embedding_dim:
        raise DimensionError(f"validation dim {val_ds.embedding_dim} != train dim {train_ds.embedding_dim}")

    teacher_report = None
    if model.model_kind == "tri_distill":
        if not train_ds.has_node_texts:
            raise DimensionError("tri_distill needs node_text_embeddings in the training data")
        if teacher is None:
            log.info("training distillation teacher")
            teacher, teacher_report = train_teacher(train_ds, val_ds, cfg)
        if teacher.embedding_dim != train_ds.embedding_dim:
            raise DimensionError("teacher checkpoint embedding_dim differs from training data")
        teacher_params = teacher.tensors()

    params = init_params(model, train_ds.embedding_dim, cfg.seed)
    stream = nx.DropoutStream(cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    state = nx.AdamState(lr=cfg.learning_rate)
    samples = _release_ordered(train_ds)
    report = TrainReport(teacher=teacher_report)
    best = {k: v.data.copy() for k, v in params.items()}
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(samples))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            batch = collate(chunk, with_text=model.use_text)
            out = forward(params, model, batch, training=True, stream=stream)
            loss = nx.scale(cross_entropy_loss(out.log_probs, batch.labels, batch.video_mask), model.ce_weight)
            if model.model_kind == "tri_distill":
                t_out = forward(teacher_params, teacher.model, collate(chunk, with_text=True), training=False)
                loss = nx.add(loss, nx.scale(distillation_loss(out, t_out), model.distill_weight))
            value = loss.item()
            if not math.isfinite(value):
                report.diverged = True
                break
            for p in params.values():
                p.zero_grad()
            loss.backward()
            new, state = nx.adam_step(
                {k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()}, state
            )
            for k, p in params.items():
                p.data = new[k]
            losses.append(value)
            weights.append(len(chunk))
        if report.diverged:
            log.warning("training diverged in epoch %d", epoch)
            break

        val = evaluate_params(params, model, val_ds, batch_size=cfg.batch_size)
        sel = selection_value(val, cfg.selection_metric)
        train_loss = float(np.average(losses, weights=weights))
        report.epochs.append(EpochRecord(epoch, train_loss, sel, val.to_json()["micro"]))
        log.info("epoch %d loss %.4f val %s %.4f", epoch, train_loss, cfg.selection_metric, sel)
        if sel > report.best_selection:
            report.best_selection, report.best_epoch = sel, epoch
            best = {k: v.data.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if cfg.early_stopping_patience is not None and stale >= cfg.early_stopping_patience:
                break

    report.wall_time_s = time.perf_counter() - started
    return Checkpoint(model, train_ds.embedding_dim, best), report


@dataclass
class GridResult:
    learning_rate: float
    dropout_p: float
    selection: float
    diverged: bool


def grid_search(
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    teacher: Checkpoint | None = None,
) -> tuple[TrainConfig, Checkpoint, list[GridResult]]:
    """Train every (lr, dropout) cell; keep the first best by validation."""
    best: tuple[float, TrainConfig, Checkpoint] | None = None
    results = []
    for lr in cfg.lr_grid:
        for p in cfg.dropout_grid:
            cell = replace(cfg, learning_rate=lr, dropout_p=p)
            ckpt, report = train(train_ds, val_ds, cell, teacher=teacher)
            score = -math.inf if report.diverged else report.best_selection
            results.append(GridResult(lr, p, score, report.diverged))
            if best is None or score > best[0]:
                best = (score, cell, ckpt)
    return best[1], best[2], results
