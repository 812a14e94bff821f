"""V-Transformer and Tri-Transformer (plus its text-conditioned teacher).

Both models treat node assignment as a 24-way classification per video.
The V-Transformer encodes the release-ordered videos and classifies each
one with a linear head. The Tri-Transformer runs a joint encoder over 24
learnable node tokens and the video tokens, refines each side with its own
encoder, then scores every video against every node with a scaled dot
product, pointer-network style.

Forward functions take videos in the order given; callers that want the
release-time prior sort first (``predict_sample`` does).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import DimensionError, LabelVector, TimelineSample, order_videos_by_release, reorder
from .metrics import postprocess_skip_empty
from .numerics import Tensor

MAX_CLASSES = 24
MODEL_KINDS = ("v", "tri", "tri_distill")

Params = dict[str, Tensor]

__all__ = [
    "MAX_CLASSES",
    "ModelConfig",
    "Batch",
    "ForwardOutput",
    "collate",
    "init_params",
    "forward",
    "v_transformer_forward",
    "tri_transformer_forward",
    "cross_entropy_loss",
    "distillation_loss",
    "predict_assignments",
    "postprocess_skip_empty",
    "predict_sample",
]


@dataclass(frozen=True)
class ModelConfig:
    model_kind: str = "tri"
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    feedforward_dim: int = 128
    dropout_p: float = 0.0
    max_classes: int = MAX_CLASSES
    use_video_pe: bool = True
    use_encoders_2_3: bool = True
    distill_weight: float = 0.1
    ce_weight: float = 1.0
    d_text: int = 0
    # text-conditioned teacher: node text embeddings are added to node tokens
    use_text: bool = False

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal position encodings")
        if self.max_classes != MAX_CLASSES:
            raise ValueError("max_classes is fixed at 24")
        if self.distill_weight < 0 or self.ce_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.use_text and self.model_kind == "v":
            raise ValueError("text conditioning only exists for the Tri-Transformer")
        if self.use_text and self.d_text <= 0:
            raise ValueError("use_text needs d_text > 0")

    @property
    def is_tri(self) -> bool:
        return self.model_kind in ("tri", "tri_distill")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> ModelConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    embeddings: np.ndarray  # [B, N, D], zero padded
    video_mask: np.ndarray  # [B, N] bool
    labels: np.ndarray  # [B, N] int, 0 on padding
    texts: np.ndarray | None = None  # [B, 24, D_text], zero beyond K
    topic_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def collate(samples: Sequence[TimelineSample], with_text: bool = False) -> Batch:
    """Pad a list of samples (videos in the order given) into one batch."""
    n_max = max(s.n for s in samples)
    dim = len(samples[0].videos[0].embedding) if samples[0].has_embeddings else 0
    emb = np.zeros((len(samples), n_max, dim))
    mask = np.zeros((len(samples), n_max), dtype=bool)
    labels = np.zeros((len(samples), n_max), dtype=np.int64)
    texts = None
    for b, s in enumerate(samples):
        m = s.embedding_matrix()
        if m.shape[1] != dim:
            raise DimensionError(f"{s.topic_id}: embedding dim {m.shape[1]} != {dim}")
        emb[b, : s.n] = m
        mask[b, : s.n] = True
        labels[b, : s.n] = s.labels
    if with_text:
        if any(s.node_text_embeddings is None for s in samples):
            missing = next(s.topic_id for s in samples if s.node_text_embeddings is None)
            raise DimensionError(f"{missing}: node text embeddings required")
        d_text = len(samples[0].node_text_embeddings[0])
        texts = np.zeros((len(samples), MAX_CLASSES, d_text))
        for b, s in enumerate(samples):
            t = s.text_matrix()
            if t.shape[0] > MAX_CLASSES:
                raise DimensionError(f"{s.topic_id}: {t.shape[0]} node texts exceed {MAX_CLASSES}")
            if t.shape[1] != d_text:
                raise DimensionError(f"{s.topic_id}: text dim {t.shape[1]} != {d_text}")
            texts[b, : t.shape[0]] = t
    return Batch(emb, mask, labels, texts, [s.topic_id for s in samples])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _encoder_params(rng, prefix: str, cfg: ModelConfig, final_bias: bool = True) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.feedforward_dim
    out = {}
    for i in range(cfg.num_layers):
        p = f"{prefix}.{i}"
        out[f"{p}.ln1.g"] = np.ones(d)
        out[f"{p}.ln1.b"] = np.zeros(d)
        out[f"{p}.attn.w_qkv"] = np.concatenate([nx.xavier_uniform(rng, d, d) for _ in range(3)], axis=1)
        out[f"{p}.attn.w_o"] = nx.xavier_uniform(rng, d, d)
        out[f"{p}.attn.b_o"] = np.zeros(d)
        out[f"{p}.ln2.g"] = np.ones(d)
        out[f"{p}.ln2.b"] = np.zeros(d)
        out[f"{p}.ff.w1"] = nx.xavier_uniform(rng, d, f)
        out[f"{p}.ff.b1"] = np.zeros(f)
        out[f"{p}.ff.w2"] = nx.xavier_uniform(rng, f, d)
        out[f"{p}.ff.b2"] = np.zeros(d)
    out[f"{prefix}.ln_f.g"] = np.ones(d)
    if final_bias:
        out[f"{prefix}.ln_f.b"] = np.zeros(d)
    return out


def init_params(cfg: ModelConfig, embedding_dim: int, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    raw = {
        "input.w": nx.xavier_uniform(rng, embedding_dim, d),
        "input.b": np.zeros(d),
    }
    raw.update(_encoder_params(rng, "enc1", cfg))
    if cfg.is_tri:
        raw["node.emb"] = nx.xavier_uniform(rng, MAX_CLASSES, d)
        raw["node.pe"] = nx.xavier_uniform(rng, MAX_CLASSES, d)
        if cfg.use_encoders_2_3:
            # a bias shared by all node keys cancels in the softmax over nodes
            raw.update(_encoder_params(rng, "enc2", cfg, final_bias=False))
            raw.update(_encoder_params(rng, "enc3", cfg))
        raw["score.w_q"] = nx.xavier_uniform(rng, d, d)
        raw["score.w_k"] = nx.xavier_uniform(rng, d, d)
        if cfg.use_text:
            raw["text.w"] = nx.xavier_uniform(rng, cfg.d_text, d)
    else:
        raw["cls.w"] = nx.xavier_uniform(rng, d, MAX_CLASSES)
        raw["cls.b"] = np.zeros(MAX_CLASSES)
    return {name: Tensor(value, requires_grad=True) for name, value in raw.items()}


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def _attention(x: Tensor, key_mask: np.ndarray, params: Params, p: str, cfg: ModelConfig, ctx) -> Tensor:
    bsz, t, d = x.shape
    h = cfg.num_heads
    dh = d // h
    # no q/k/v bias: a key bias is invisible to the row-wise softmax
    qkv = _linear(x, params[f"{p}.attn.w_qkv"])
    qkv = nx.transpose(nx.reshape(qkv, (bsz, t, 3, h, dh)), (2, 0, 3, 1, 4))  # [3, B, H, T, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = nx.masked_softmax(logits, key_mask[:, None, None, :], axis=-1)
    att = nx.dropout(att, cfg.dropout_p, ctx.stream, ctx.training)
    out = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (bsz, t, d))
    return _linear(out, params[f"{p}.attn.w_o"], params[f"{p}.attn.b_o"])


def _encoder(x: Tensor, key_mask: np.ndarray, params: Params, prefix: str, cfg: ModelConfig, ctx) -> Tensor:
    """Pre-norm Transformer encoder stack with a final layer norm."""
    for i in range(cfg.num_layers):
        p = f"{prefix}.{i}"
        y = nx.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = nx.add(x, nx.dropout(_attention(y, key_mask, params, p, cfg, ctx), cfg.dropout_p, ctx.stream, ctx.training))
        y = nx.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        y = _linear(nx.relu(_linear(y, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])), params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        x = nx.add(x, nx.dropout(y, cfg.dropout_p, ctx.stream, ctx.training))
    return nx.layer_norm(x, params[f"{prefix}.ln_f.g"], params.get(f"{prefix}.ln_f.b"))


@dataclass
class _Context:
    training: bool = False
    stream: nx.DropoutStream | None = None


@dataclass
class ForwardOutput:
    log_probs: Tensor  # [B, N, 24]
    video_mask: np.ndarray  # [B, N]
    node_reps: Tensor | None = None  # encoder-1 node tokens [B, 24, d]
    video_reps: Tensor | None = None  # encoder-1 video tokens [B, N, d]

    @property
    def scores(self) -> np.ndarray:
        """Per-video probabilities over the 24 node ids."""
        return np.exp(self.log_probs.data)


def _embed_videos(batch: Batch, params: Params, cfg: ModelConfig) -> Tensor:
    n = batch.embeddings.shape[1]
    x = nx.scale(_linear(Tensor(batch.embeddings), params["input.w"], params["input.b"]), math.sqrt(cfg.d_model))
    if cfg.use_video_pe:
        x = nx.add(x, nx.sinusoidal_pe(n, cfg.d_model))
    return x


def forward(
    params: Params,
    cfg: ModelConfig,
    batch: Batch,
    training: bool = False,
    stream: nx.DropoutStream | None = None,
) -> ForwardOutput:
    ctx = _Context(training, stream)
    videos = nx.dropout(_embed_videos(batch, params, cfg), cfg.dropout_p, stream, training)
    mask = batch.video_mask

    if not cfg.is_tri:
        h = _encoder(videos, mask, params, "enc1", cfg, ctx)
        logits = _linear(h, params["cls.w"], params["cls.b"])
        return ForwardOutput(nx.masked_log_softmax(logits, axis=-1), mask)

    bsz, n = mask.shape
    nodes = nx.add(params["node.emb"], params["node.pe"])  # [24, d]
    nodes = nx.add(Tensor(np.zeros((bsz, 1, 1))), nodes)  # [B, 24, d]
    if cfg.use_text:
        if batch.texts is None:
            raise DimensionError("text-conditioned model needs node text embeddings")
        nodes = nx.add(nodes, nx.matmul(Tensor(batch.texts), params["text.w"]))
    nodes = nx.dropout(nodes, cfg.dropout_p, stream, training)

    seq = nx.concat([nodes, videos], axis=1)
    seq_mask = np.concatenate([np.ones((bsz, MAX_CLASSES), dtype=bool), mask], axis=1)
    h1 = _encoder(seq, seq_mask, params, "enc1", cfg, ctx)
    node1 = nx.slice_axis(h1, 0, MAX_CLASSES, axis=1)
    video1 = nx.slice_axis(h1, MAX_CLASSES, MAX_CLASSES + n, axis=1)
    if cfg.use_encoders_2_3:
        node2 = _encoder(node1, np.ones((bsz, MAX_CLASSES), dtype=bool), params, "enc2", cfg, ctx)
        video2 = _encoder(video1, mask, params, "enc3", cfg, ctx)
    else:
        node2, video2 = node1, video1

    q = nx.matmul(video2, params["score.w_q"])
    k = nx.matmul(node2, params["score.w_k"])
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(cfg.d_model))
    return ForwardOutput(nx.masked_log_softmax(logits, axis=-1), mask, node1, video1)


def _single(sample: TimelineSample, with_text: bool) -> Batch:
    return collate([sample], with_text=with_text)


def v_transformer_forward(
    sample: TimelineSample, params: Params, cfg: ModelConfig, mode: str = "eval", stream=None
) -> ForwardOutput:
    if cfg.is_tri:
        raise ValueError("v_transformer_forward needs model_kind 'v'")
    return forward(params, cfg, _single(sample, False), mode == "train", stream)


def tri_transformer_forward(
    sample: TimelineSample,
    params: Params,
    cfg: ModelConfig,
    mode: str = "eval",
    text_embeddings: np.ndarray | None = None,
    stream=None,
) -> ForwardOutput:
    if not cfg.is_tri:
        raise ValueError("tri_transformer_forward needs a Tri-Transformer config")
    batch = _single(sample, False)
    if text_embeddings is not None:
        text_embeddings = np.asarray(text_embeddings, dtype=np.float64)
        if text_embeddings.shape[0] > MAX_CLASSES:
            raise DimensionError(f"{text_embeddings.shape[0]} text embeddings exceed {MAX_CLASSES} nodes")
        texts = np.zeros((1, MAX_CLASSES, text_embeddings.shape[1]))
        texts[0, : text_embeddings.shape[0]] = text_embeddings
        batch.texts = texts
        cfg = replace(cfg, use_text=True, d_text=text_embeddings.shape[1])
    return forward(params, cfg, batch, mode == "train", stream)


# ---------------------------------------------------------------------------
# losses and decoding
# ---------------------------------------------------------------------------


def cross_entropy_loss(log_probs: Tensor, labels, mask: np.ndarray | None = None) -> Tensor:
    """Mean over real videos of -log p(label); labels are 1-based node ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    real = labels[mask]
    if real.size == 0:
        raise ValueError("no labelled videos")
    if real.min() < 1 or real.max() > log_probs.shape[-1]:
        raise ValueError(f"labels must lie in 1..{log_probs.shape[-1]}")
    idx = np.nonzero(mask)
    picked = log_probs[(*idx, labels[idx] - 1)]
    return nx.scale(nx.reduce_sum(picked), -1.0 / real.size)


def distillation_loss(student: ForwardOutput, teacher: ForwardOutput) -> Tensor:
    """Mean squared difference of encoder-1 node and video representations.

    Teacher values enter as constants. Padded video slots are ignored.
    """
    if student.node_reps is None or teacher.node_reps is None:
        raise ValueError("distillation needs Tri-Transformer outputs")
    if student.node_reps.shape != teacher.node_reps.shape or student.video_reps.shape != teacher.video_reps.shape:
        raise nx.ShapeError(
            f"representation shapes differ: {student.node_reps.shape}/{student.video_reps.shape} "
            f"vs {teacher.node_reps.shape}/{teacher.video_reps.shape}"
        )
    d = student.node_reps.shape[-1]
    node_diff = nx.sub(student.node_reps, teacher.node_reps.data)
    weight = student.video_mask[..., None].astype(np.float64)
    video_diff = nx.mul(nx.sub(student.video_reps, teacher.video_reps.data), weight)
    count = node_diff.data.size + student.video_mask.sum() * d
    total = nx.add(nx.reduce_sum(nx.square(node_diff)), nx.reduce_sum(nx.square(video_diff)))
    return nx.scale(total, 1.0 / count)


def predict_assignments(scores) -> LabelVector:
    """Per-row argmax as a 1-based node id; ties go to the smaller id."""
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return tuple(int(i) + 1 for i in np.argmax(arr, axis=-1))


def predict_batch(params: Params, cfg: ModelConfig, samples: Sequence[TimelineSample]) -> list[LabelVector]:
    """Raw predictions for each sample, aligned with its stored video order."""
    ordered, perms = [], []
    for s in samples:
        perm = order_videos_by_release(s)
        perms.append(perm)
        ordered.append(reorder(s, perm))
    out = forward(params, cfg, collate(ordered, with_text=cfg.use_text), training=False)
    preds = []
    for b, (s, perm) in enumerate(zip(samples, perms)):
        sorted_pred = predict_assignments(out.log_probs.data[b, : s.n])
        raw = [0] * s.n
        for pos, i in enumerate(perm):
            raw[i] = sorted_pred[pos]
        preds.append(tuple(raw))
    return preds


def predict_sample(
    params: Params, cfg: ModelConfig, sample: TimelineSample, postprocess: bool = True
) -> LabelVector:
    raw = predict_batch(params, cfg, [sample])[0]
    return postprocess_skip_empty(raw) if postprocess else raw
