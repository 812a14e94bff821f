"""Timeline evaluation: IoU node matching, Hamming, Euclidean, pairwise agreement.

All per-sample quantities are exact ``Fraction``s. The IoU threshold test in
particular must be exact: |A & B| >= sigma * |A | B| sits right on the
boundary for common cases (IoU = 1/2 with sigma = 1/2).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, LabelVector

METRIC_NAMES = ("precision", "recall", "hamming", "euclidean", "agreement")


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreConfig:
    sigma: Fraction = Fraction(1, 2)

    def __post_init__(self):
        sigma = self.sigma
        if not isinstance(sigma, Fraction):
            # via str so 0.51 becomes 51/100 rather than its binary expansion
            sigma = Fraction(str(sigma))
            object.__setattr__(self, "sigma", sigma)
        if not (0 < sigma <= 1):
            raise ScoringError(f"sigma must lie in (0, 1], got {sigma}")


def partition(labels: Sequence[int]) -> dict[int, frozenset[int]]:
    """Node id -> set of video indices, for each id that occurs."""
    groups: dict[int, set[int]] = {}
    for i, a in enumerate(labels):
        groups.setdefault(a, set()).add(i)
    return {a: frozenset(g) for a, g in sorted(groups.items())}


def iou(a: frozenset[int] | set[int], b: frozenset[int] | set[int]) -> Fraction:
    union = len(a | b)
    if union == 0:
        raise ScoringError("IoU of two empty sets is undefined")
    return Fraction(len(a & b), union)


def max_bipartite_matching(edges: Sequence[tuple[int, int]], k: int, k_hat: int) -> int:
    """Maximum matching cardinality via unit-capacity augmenting paths.

    Nodes are 0-based: left side ``range(k)``, right side ``range(k_hat)``.
    Each augmenting path found by DFS in the residual graph raises the flow
    by one (Ford-Fulkerson with unit capacities).
    """
    adj: list[list[int]] = [[] for _ in range(k)]
    for u, v in edges:
        if not (0 <= u < k and 0 <= v < k_hat):
            raise ScoringError(f"edge {(u, v)} out of range for {k} x {k_hat} graph")
        adj[u].append(v)
    match_right = [-1] * k_hat

    def augment(u: int, visited: list[bool]) -> bool:
        for v in adj[u]:
            if visited[v]:
                continue
            visited[v] = True
            if match_right[v] < 0 or augment(match_right[v], visited):
                match_right[v] = u
                return True
        return False

    return sum(augment(u, [False] * k_hat) for u in range(k))


def _check_lengths(gt: Sequence[int], pred: Sequence[int]) -> None:
    if len(gt) != len(pred):
        raise ScoringError(f"length mismatch: ground truth has {len(gt)} videos, prediction {len(pred)}")
    if len(gt) == 0:
        raise ScoringError("cannot score an empty label vector")


def node_precision_recall(
    gt: Sequence[int], pred: Sequence[int], cfg: ScoreConfig = ScoreConfig()
) -> tuple[int, int, int, Fraction, Fraction]:
    """Return (matched, K, K_hat, precision, recall)."""
    _check_lengths(gt, pred)
    gt_nodes = list(partition(gt).values())
    pred_nodes = list(partition(pred).values())
    sigma = cfg.sigma
    edges = []
    for u, c in enumerate(gt_nodes):
        for v, c_hat in enumerate(pred_nodes):
            inter = len(c & c_hat)
            if inter and inter * sigma.denominator >= sigma.numerator * len(c | c_hat):
                edges.append((u, v))
    matched = max_bipartite_matching(edges, len(gt_nodes), len(pred_nodes))
    k, k_hat = len(gt_nodes), len(pred_nodes)
    return matched, k, k_hat, Fraction(matched, k_hat), Fraction(matched, k)


def hamming_count(gt: Sequence[int], pred: Sequence[int]) -> int:
    _check_lengths(gt, pred)
    return sum(a != b for a, b in zip(gt, pred))


def hamming(gt: Sequence[int], pred: Sequence[int]) -> Fraction:
    """Fraction of videos whose node id differs."""
    return Fraction(hamming_count(gt, pred), len(gt))


def euclidean_sum(gt: Sequence[int], pred: Sequence[int]) -> int:
    _check_lengths(gt, pred)
    return sum(abs(a - b) for a, b in zip(gt, pred))


def euclidean(gt: Sequence[int], pred: Sequence[int]) -> Fraction:
    """Mean absolute node-id difference per video."""
    return Fraction(euclidean_sum(gt, pred), len(gt))


def pairwise_agreement(gt: Sequence[int], pred: Sequence[int]) -> tuple[int, int]:
    """(correct, total) over unordered pairs, comparing the <, =, > relation."""
    _check_lengths(gt, pred)
    a = np.asarray(gt, dtype=np.int64)
    b = np.asarray(pred, dtype=np.int64)
    n = len(a)
    iu = np.triu_indices(n, k=1)
    same = np.sign(a[:, None] - a[None, :])[iu] == np.sign(b[:, None] - b[None, :])[iu]
    return int(same.sum()), n * (n - 1) // 2


@dataclass(frozen=True)
class SampleScore:
    matched: int
    K: int
    K_hat: int
    precision: Fraction
    recall: Fraction
    hamming_count: int
    euclidean_sum: int
    pairs_correct: int
    pairs_total: int
    N: int
    topic_id: str = ""

    @property
    def hamming_avg(self) -> Fraction:
        return Fraction(self.hamming_count, self.N)

    @property
    def euclidean_avg(self) -> Fraction:
        return Fraction(self.euclidean_sum, self.N)

    @property
    def agreement(self) -> Fraction | None:
        return Fraction(self.pairs_correct, self.pairs_total) if self.pairs_total else None

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "N": self.N,
            "K": self.K,
            "K_hat": self.K_hat,
            "matched": self.matched,
            "precision": float(self.precision),
            "recall": float(self.recall),
            "hamming": float(self.hamming_avg),
            "euclidean": float(self.euclidean_avg),
            "pairs_correct": self.pairs_correct,
            "pairs_total": self.pairs_total,
            "agreement": None if self.agreement is None else float(self.agreement),
        }


def score_sample(
    gt: Sequence[int], pred: Sequence[int], cfg: ScoreConfig = ScoreConfig(), topic_id: str = ""
) -> SampleScore:
    matched, k, k_hat, precision, recall = node_precision_recall(gt, pred, cfg)
    correct, total = pairwise_agreement(gt, pred)
    return SampleScore(
        matched=matched,
        K=k,
        K_hat=k_hat,
        precision=precision,
        recall=recall,
        hamming_count=hamming_count(gt, pred),
        euclidean_sum=euclidean_sum(gt, pred),
        pairs_correct=correct,
        pairs_total=total,
        N=len(gt),
        topic_id=topic_id,
    )


@dataclass(frozen=True)
class MetricBlock:
    precision: Fraction
    recall: Fraction
    hamming: Fraction
    euclidean: Fraction
    agreement: Fraction | None

    def to_json(self) -> dict:
        return {name: None if getattr(self, name) is None else float(getattr(self, name)) for name in METRIC_NAMES}


def aggregate(scores: Sequence[SampleScore], mode: str) -> MetricBlock:
    """Macro: unweighted mean over timelines. Micro: ratio of summed counts."""
    if not scores:
        raise ScoringError("cannot aggregate zero samples")
    if mode == "macro":
        n = len(scores)
        with_pairs = [s.agreement for s in scores if s.pairs_total]
        return MetricBlock(
            precision=sum((s.precision for s in scores), Fraction(0)) / n,
            recall=sum((s.recall for s in scores), Fraction(0)) / n,
            hamming=sum((s.hamming_avg for s in scores), Fraction(0)) / n,
            euclidean=sum((s.euclidean_avg for s in scores), Fraction(0)) / n,
            agreement=sum(with_pairs, Fraction(0)) / len(with_pairs) if with_pairs else None,
        )
    if mode == "micro":
        videos = sum(s.N for s in scores)
        pairs = sum(s.pairs_total for s in scores)
        return MetricBlock(
            precision=Fraction(sum(s.matched for s in scores), sum(s.K_hat for s in scores)),
            recall=Fraction(sum(s.matched for s in scores), sum(s.K for s in scores)),
            hamming=Fraction(sum(s.hamming_count for s in scores), videos),
            euclidean=Fraction(sum(s.euclidean_sum for s in scores), videos),
            agreement=Fraction(sum(s.pairs_correct for s in scores), pairs) if pairs else None,
        )
    raise ScoringError(f"unknown aggregation mode {mode!r}")


@dataclass(frozen=True)
class MetricsReport:
    per_sample: tuple[SampleScore, ...]
    macro: MetricBlock
    micro: MetricBlock
    sigma: Fraction = field(default=Fraction(1, 2))

    def to_json(self) -> dict:
        return {
            "sigma": float(self.sigma),
            "macro": self.macro.to_json(),
            "micro": self.micro.to_json(),
            "per_sample": [s.to_json() for s in self.per_sample],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def postprocess_skip_empty(raw: Sequence[int]) -> LabelVector:
    """Renumber ids by rank among the distinct ids present (1..K_hat)."""
    rank = {a: r for r, a in enumerate(sorted(set(raw)), start=1)}
    return tuple(rank[a] for a in raw)


def build_report(scores: Sequence[SampleScore], cfg: ScoreConfig = ScoreConfig()) -> MetricsReport:
    return MetricsReport(tuple(scores), aggregate(scores, "macro"), aggregate(scores, "micro"), cfg.sigma)


def score_dataset(
    gt: Dataset,
    predictions: Mapping[str, Sequence[int]],
    cfg: ScoreConfig = ScoreConfig(),
    postprocess: bool = False,
    threads: int = 1,
) -> MetricsReport:
    """Score every ground-truth timeline against its prediction."""
    jobs = []
    for s in gt.samples:
        if s.topic_id not in predictions:
            raise ScoringError(f"{s.topic_id}: no prediction for this topic")
        pred = tuple(predictions[s.topic_id])
        if len(pred) != len(s.labels):
            raise ScoringError(f"{s.topic_id}: prediction has {len(pred)} ids for {len(s.labels)} videos")
        if postprocess:
            pred = postprocess_skip_empty(pred)
        jobs.append((s.labels, pred, s.topic_id))

    def run(job):
        return score_sample(job[0], job[1], cfg, job[2])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(run, jobs))
    else:
        scores = [run(j) for j in jobs]
    return build_report(scores, cfg)


def format_table(report: MetricsReport) -> str:
    """Aligned text table with the usual benchmark columns."""
    header = ["", "Precision/Recall", "Hamming", "Euclidean", "Agreement"]
    rows = []
    for name, block in (("Macro", report.macro), ("Micro", report.micro)):
        agreement = "n/a" if block.agreement is None else f"{float(block.agreement):.6g}"
        rows.append(
            [
                name,
                f"{float(block.precision):.6g}/{float(block.recall):.6g}",
                f"{float(block.hamming):.6g}",
                f"{float(block.euclidean):.6g}",
                agreement,
            ]
        )
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
