"""Timeline samples, dataset JSON IO, validation, statistics and synthetic data."""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

MIN_NODES = 2
MAX_NODES = 24

LabelVector = tuple[int, ...]


class DatasetError(ValueError):
    """Base class for dataset problems."""


class ParseError(DatasetError):
    def __init__(self, msg: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(msg + where)
        self.line = line
        self.column = column


class ValidationError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Video:
    id: str
    release_time: int | None = None
    embedding: tuple[float, ...] | None = None
    title: str | None = None


@dataclass(frozen=True)
class TimelineSample:
    topic_id: str
    videos: tuple[Video, ...]
    labels: LabelVector
    num_nodes: int
    node_text_embeddings: tuple[tuple[float, ...], ...] | None = None

    @property
    def n(self) -> int:
        return len(self.videos)

    @property
    def has_embeddings(self) -> bool:
        return all(v.embedding is not None for v in self.videos)

    def embedding_matrix(self) -> np.ndarray:
        if not self.has_embeddings:
            raise DimensionError(f"{self.topic_id}: sample has no video embeddings (metrics-only)")
        return np.array([v.embedding for v in self.videos], dtype=np.float64)

    def text_matrix(self) -> np.ndarray | None:
        if self.node_text_embeddings is None:
            return None
        return np.array(self.node_text_embeddings, dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    split_name: str
    embedding_dim: int
    samples: tuple[TimelineSample, ...] = ()

    @property
    def metrics_only(self) -> bool:
        return any(not s.has_embeddings for s in self.samples)

    @property
    def has_node_texts(self) -> bool:
        return bool(self.samples) and all(s.node_text_embeddings is not None for s in self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def by_topic(self) -> dict[str, TimelineSample]:
        return {s.topic_id: s for s in self.samples}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_sample(s: TimelineSample) -> list[str]:
    """Return a list of invariant violations; empty means the sample is valid."""
    problems = []
    k = s.num_nodes
    k_ok = MIN_NODES <= k <= MAX_NODES
    if not k_ok:
        problems.append("K out of range")
    if len(s.labels) != len(s.videos):
        problems.append(f"labels length {len(s.labels)} != video count {len(s.videos)}")

    seen: dict[str, int] = {}
    for i, v in enumerate(s.videos):
        if v.id in seen:
            problems.append(f"video {v.id!r} at index {i} duplicates index {seen[v.id]}")
        else:
            seen[v.id] = i

    for i, a in enumerate(s.labels):
        if a < 1 or (k_ok and a > k):
            problems.append(f"label {a} at index {i} outside 1..{k}")
    if k_ok:
        present = set(s.labels)
        problems.extend(f"node {node} empty" for node in range(1, k + 1) if node not in present)

    dims = {len(v.embedding) for v in s.videos if v.embedding is not None}
    if len(dims) > 1:
        problems.append(f"mixed embedding lengths {sorted(dims)}")
    if s.node_text_embeddings is not None:
        if len(s.node_text_embeddings) != k:
            problems.append(f"{len(s.node_text_embeddings)} node texts for {k} nodes")
        if len({len(t) for t in s.node_text_embeddings}) > 1:
            problems.append("mixed node text embedding lengths")
    return problems


def _check_sample(s: TimelineSample) -> None:
    problems = validate_sample(s)
    if problems:
        raise ValidationError(f"{s.topic_id}: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# JSON IO
# ---------------------------------------------------------------------------


def _strip_hash_comments(text: str) -> str:
    """Drop ``# ...`` comments outside JSON strings, keeping line structure."""
    out = []
    in_str = escaped = in_comment = False
    for ch in text:
        if in_comment:
            if ch == "\n":
                in_comment = False
                out.append(ch)
            continue
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "#":
            in_comment = True
            continue
        out.append(ch)
    return "".join(out)


def _load_json(text: str | bytes):
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    # hand-annotated listings carry '#' comments after values
    try:
        return json.loads(_strip_hash_comments(text))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from None


def _as_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{what} must be an integer, got {value!r}")
    return value


def _parse_bare(doc: Mapping) -> Dataset:
    samples = []
    for topic_id, nodes in doc.items():
        if not isinstance(nodes, list) or not all(isinstance(n, list) for n in nodes):
            raise ValidationError(f"{topic_id}: expected a list of node video-id lists")
        videos, labels, owner = [], [], {}
        for k, node in enumerate(nodes, start=1):
            if not node:
                raise ValidationError(f"{topic_id}: node {k} empty")
            for vid in node:
                if not isinstance(vid, str):
                    raise ValidationError(f"{topic_id}: video id {vid!r} is not a string")
                if vid in owner:
                    raise ValidationError(
                        f"{topic_id}: video assigned to two nodes ({vid!r} in nodes {owner[vid]} and {k})"
                    )
                owner[vid] = k
                videos.append(Video(id=vid))
                labels.append(k)
        sample = TimelineSample(topic_id, tuple(videos), tuple(labels), len(nodes))
        _check_sample(sample)
        samples.append(sample)
    return Dataset(split_name="all", embedding_dim=0, samples=tuple(samples))


def _parse_video(raw: Mapping, topic_id: str) -> Video:
    if "id" not in raw:
        raise ValidationError(f"{topic_id}: video entry without id")
    emb = raw.get("embedding")
    rt = raw.get("release_time")
    return Video(
        id=str(raw["id"]),
        release_time=None if rt is None else _as_int(rt, f"{topic_id}: release_time"),
        embedding=None if emb is None else tuple(float(x) for x in emb),
        title=raw.get("title"),
    )


def _parse_extended(doc: Mapping) -> Dataset:
    dim = _as_int(doc.get("embedding_dim", 0), "embedding_dim")
    samples = []
    for raw in doc.get("samples", []):
        topic_id = str(raw.get("topic_id", ""))
        videos = tuple(_parse_video(v, topic_id) for v in raw.get("videos", []))
        labels = tuple(_as_int(a, f"{topic_id}: label") for a in raw.get("labels", []))
        texts = raw.get("node_text_embeddings")
        if texts is not None:
            texts = tuple(tuple(float(x) for x in t) for t in texts)
        num_nodes = _as_int(raw.get("num_nodes", max(labels, default=0)), f"{topic_id}: num_nodes")
        sample = TimelineSample(topic_id, videos, labels, num_nodes, texts)
        has = [v.embedding is not None for v in videos]
        if any(has) and not all(has):
            raise DimensionError(f"{topic_id}: some videos lack embeddings")
        for v in videos:
            if v.embedding is not None and len(v.embedding) != dim:
                raise DimensionError(
                    f"{topic_id}: video {v.id!r} embedding has length {len(v.embedding)}, dataset declares {dim}"
                )
        _check_sample(sample)
        samples.append(sample)
    text_dims = {len(t) for s in samples if s.node_text_embeddings for t in s.node_text_embeddings}
    if len(text_dims) > 1:
        raise DimensionError(f"mixed node text embedding dimensions {sorted(text_dims)}")
    return Dataset(split_name=str(doc.get("split", "all")), embedding_dim=dim, samples=tuple(samples))


def parse_dataset(text: str | bytes) -> Dataset:
    """Parse either the extended schema or the bare ``{url: [[ids], ...]}`` mapping."""
    doc = _load_json(text)
    if not isinstance(doc, dict):
        raise ParseError("top-level JSON value must be an object")
    if "samples" in doc or "embedding_dim" in doc:
        return _parse_extended(doc)
    if set(doc) == {"splits"} and isinstance(doc["splits"], dict):
        return _parse_split_bundle(doc["splits"])
    return _parse_bare(doc)


def _parse_split_bundle(splits: Mapping) -> Dataset:
    """Merge ``{"splits": {name: document}}`` into one dataset."""
    parts = []
    for name, sub in splits.items():
        if not isinstance(sub, dict):
            raise ValidationError(f"split {name!r} must be a JSON object")
        parts.append(_parse_extended(sub) if "samples" in sub or "embedding_dim" in sub else _parse_bare(sub))
    dims = {p.embedding_dim for p in parts if not p.metrics_only and p.samples}
    if len(dims) > 1:
        raise DimensionError(f"splits disagree on embedding_dim: {sorted(dims)}")
    samples = tuple(s for p in parts for s in p.samples)
    ids = [s.topic_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("topic_id repeated across splits")
    return Dataset("all", dims.pop() if dims else 0, samples)


def _video_json(v: Video) -> dict:
    out: dict = {"id": v.id}
    if v.release_time is not None:
        out["release_time"] = v.release_time
    if v.embedding is not None:
        out["embedding"] = list(v.embedding)
    if v.title is not None:
        out["title"] = v.title
    return out


def write_dataset(d: Dataset) -> bytes:
    doc = {
        "split": d.split_name,
        "embedding_dim": d.embedding_dim,
        "samples": [
            {
                "topic_id": s.topic_id,
                "videos": [_video_json(v) for v in s.videos],
                "labels": list(s.labels),
                "num_nodes": s.num_nodes,
                **(
                    {"node_text_embeddings": [list(t) for t in s.node_text_embeddings]}
                    if s.node_text_embeddings is not None
                    else {}
                ),
            }
            for s in d.samples
        ],
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def parse_predictions(text: str | bytes) -> dict[str, LabelVector]:
    doc = _load_json(text)
    if not isinstance(doc, dict):
        raise ParseError("prediction file must be a JSON object {topic_id: [ids]}")
    preds = {}
    for topic_id, ids in doc.items():
        if not isinstance(ids, list):
            raise ValidationError(f"{topic_id}: prediction must be a list of node ids")
        preds[topic_id] = tuple(_as_int(a, f"{topic_id}: predicted id") for a in ids)
    return preds


def write_predictions(preds: Mapping[str, Sequence[int]]) -> bytes:
    return (json.dumps({k: [int(a) for a in v] for k, v in preds.items()}, indent=1) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# ordering, splitting, statistics
# ---------------------------------------------------------------------------


def order_videos_by_release(s: TimelineSample) -> list[int]:
    """Indices sorted by (release_time, id, original index)."""
    if any(v.release_time is None for v in s.videos):
        raise DimensionError(f"{s.topic_id}: release times missing (metrics-only sample)")
    return sorted(range(len(s.videos)), key=lambda i: (s.videos[i].release_time, s.videos[i].id, i))


def reorder(s: TimelineSample, perm: Sequence[int]) -> TimelineSample:
    return TimelineSample(
        s.topic_id,
        tuple(s.videos[i] for i in perm),
        tuple(s.labels[i] for i in perm),
        s.num_nodes,
        s.node_text_embeddings,
    )


def split_dataset(
    d: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    n = len(d.samples)
    # largest-remainder apportionment keeps each size within 1 of its share
    shares = [r * n for r in ratios]
    sizes = [math.floor(x) for x in shares]
    by_remainder = sorted(range(3), key=lambda i: (-(shares[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for name, size in zip(("train", "val", "test"), sizes):
        idx = perm[start : start + size]
        start += size
        out.append(Dataset(name, d.embedding_dim, tuple(d.samples[i] for i in idx)))
    return tuple(out)


@dataclass
class StatsReport:
    num_timelines: int = 0
    num_nodes: int = 0
    num_videos: int = 0
    videos_per_node: dict[int, int] = field(default_factory=dict)
    nodes_per_timeline: dict[int, int] = field(default_factory=dict)
    videos_per_timeline: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def dataset_stats(d: Dataset) -> StatsReport:
    per_node: Counter = Counter()
    per_timeline_nodes: Counter = Counter()
    per_timeline_videos: Counter = Counter()
    for s in d.samples:
        counts = Counter(s.labels)
        per_node.update(counts.values())
        per_timeline_nodes[len(counts)] += 1
        per_timeline_videos[len(s.videos)] += 1
    return StatsReport(
        num_timelines=len(d.samples),
        num_nodes=sum(per_timeline_nodes[k] * k for k in per_timeline_nodes),
        num_videos=sum(len(s.videos) for s in d.samples),
        videos_per_node=dict(sorted(per_node.items())),
        nodes_per_timeline=dict(sorted(per_timeline_nodes.items())),
        videos_per_timeline=dict(sorted(per_timeline_videos.items())),
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_ID_ALPHABET = np.array(list(string.ascii_letters + string.digits + "-_"))
_EPOCH_BASE = 1_500_000_000
_DAY = 86_400


@dataclass
class GenConfig:
    num_timelines: int = 100
    node_count_range: tuple[int, int] = (2, 24)
    videos_per_node_range: tuple[int, int] = (1, 5)
    embedding_dim: int = 16
    event_step_scale: float = 0.5
    video_noise_sigma: float = 0.1
    text_noise_sigma: float = 0.05
    release_overlap_fraction: float = 0.2
    # spacing between consecutive node timestamps, in days
    node_gap_days: tuple[int, int] = (1, 30)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.node_count_range
        if not (MIN_NODES <= lo <= hi <= MAX_NODES):
            raise ConfigError(f"node_count_range {self.node_count_range} must satisfy 2 <= min <= max <= 24")
        vlo, vhi = self.videos_per_node_range
        if not (1 <= vlo <= vhi):
            raise ConfigError(f"videos_per_node_range {self.videos_per_node_range} must satisfy 1 <= min <= max")
        glo, ghi = self.node_gap_days
        if not (1 <= glo <= ghi):
            raise ConfigError(f"node_gap_days {self.node_gap_days} must satisfy 1 <= min <= max")
        if self.num_timelines < 0:
            raise ConfigError("num_timelines must be >= 0")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if min(self.video_noise_sigma, self.text_noise_sigma, self.event_step_scale) < 0:
            raise ConfigError("sigmas and step scale must be >= 0")
        if not (0.0 <= self.release_overlap_fraction < 1.0):
            raise ConfigError("release_overlap_fraction must lie in [0, 1)")

    @classmethod
    def from_json(cls, doc: Mapping) -> GenConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig fields: {sorted(unknown)}")
        kwargs = dict(doc)
        for key in ("node_count_range", "videos_per_node_range", "node_gap_days"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x)
    return x / norm if norm > 0 else x


def _random_id(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        vid = "".join(rng.choice(_ID_ALPHABET, size=11))
        if vid not in taken:
            taken.add(vid)
            return vid


def _generate_one(cfg: GenConfig, rng: np.random.Generator, index: int) -> TimelineSample:
    dim = cfg.embedding_dim
    k = int(rng.integers(cfg.node_count_range[0], cfg.node_count_range[1] + 1))

    events = [_unit(rng.normal(size=dim))]
    for _ in range(k - 1):
        events.append(_unit(events[-1] + cfg.event_step_scale * rng.normal(size=dim)))

    gaps = rng.integers(cfg.node_gap_days[0] * _DAY, cfg.node_gap_days[1] * _DAY + 1, size=k)
    start = _EPOCH_BASE + int(rng.integers(0, 3650)) * _DAY
    stamps = start + np.concatenate([[0], np.cumsum(gaps)])  # stamps[k] closes the last interval

    counts = rng.integers(cfg.videos_per_node_range[0], cfg.videos_per_node_range[1] + 1, size=k)
    labels = np.repeat(np.arange(1, k + 1), counts)
    n = len(labels)
    # which node's interval each video's release time is drawn from
    source = labels.copy()
    n_shift = int(round(cfg.release_overlap_fraction * n))
    for i in rng.choice(n, size=n_shift, replace=False):
        a = labels[i]
        if a == 1:
            source[i] = 2
        elif a == k:
            source[i] = k - 1
        else:
            source[i] = a + (1 if rng.random() < 0.5 else -1)

    taken: set[str] = set()
    videos = []
    for a, src in zip(labels, source):
        emb = _unit(events[a - 1] + cfg.video_noise_sigma * rng.normal(size=dim))
        release = int(rng.integers(stamps[src - 1], stamps[src]))
        videos.append(Video(_random_id(rng, taken), release, tuple(float(x) for x in emb)))
    texts = tuple(
        tuple(float(x) for x in _unit(e + cfg.text_noise_sigma * rng.normal(size=dim))) for e in events
    )

    # stored order carries no information
    perm = rng.permutation(n)
    return TimelineSample(
        topic_id=f"synthetic://{cfg.seed}/{index:05d}",
        videos=tuple(videos[i] for i in perm),
        labels=tuple(int(labels[i]) for i in perm),
        num_nodes=k,
        node_text_embeddings=texts,
    )


def generate_synthetic(cfg: GenConfig) -> Dataset:
    """Deterministic synthetic timelines; see ``GenConfig`` for the knobs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    samples = tuple(_generate_one(cfg, rng, i) for i in range(cfg.num_timelines))
    for s in samples:
        _check_sample(s)
    return Dataset("synthetic", cfg.embedding_dim, samples)

