import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeline_bench.data import (
    ConfigError,
    Dataset,
    DimensionError,
    GenConfig,
    ParseError,
    TimelineSample,
    ValidationError,
    Video,
    dataset_stats,
    generate_synthetic,
    order_videos_by_release,
    parse_dataset,
    parse_predictions,
    reorder,
    split_dataset,
    validate_sample,
    write_dataset,
    write_predictions,
)

LISTING = (Path(__file__).parent / "fixtures" / "annotated_listing.json").read_text()


def sample(labels, k=None, times=None, ids=None):
    n = len(labels)
    ids = ids or [f"v{i}" for i in range(n)]
    times = times or [None] * n
    videos = tuple(Video(ids[i], times[i]) for i in range(n))
    return TimelineSample("topic", videos, tuple(labels), k if k is not None else max(labels))


# -- annotated listing --------------------------------------------------------------


def test_listing_parses_with_expected_labels():
    ds = parse_dataset(LISTING)
    assert len(ds) == 1 and ds.metrics_only
    s = ds.samples[0]
    assert s.topic_id.startswith("https://apnews.com/article/japan-accidents-tsunamis")
    assert (s.num_nodes, s.n) == (5, 17)
    assert Counter(s.labels) == {1: 5, 2: 4, 3: 2, 4: 5, 5: 1}
    assert list(s.labels) == sorted(s.labels)
    assert s.videos[0].id == "OhEbGK4PnZg" and s.videos[-1].id == "hA3fNK0rxcs"


def test_listing_stats():
    st_ = dataset_stats(parse_dataset(LISTING))
    assert (st_.num_timelines, st_.num_nodes, st_.num_videos) == (1, 5, 17)
    assert st_.videos_per_node == {1: 1, 2: 1, 4: 1, 5: 2}


def test_listing_roundtrip():
    ds = parse_dataset(LISTING)
    assert parse_dataset(write_dataset(ds)) == ds


# -- parsing ------------------------------------------------------------------------


def test_empty_inputs():
    assert len(parse_dataset("{}")) == 0
    assert len(parse_dataset('{"splits": {}}')) == 0
    assert len(parse_dataset('{"splits": {"train": {}, "test": {"samples": []}}}')) == 0


def test_split_bundle_merges_topics():
    doc = {"splits": {"a": {"t1": [["x"], ["y"]]}, "b": {"t2": [["z"], ["w", "q"]]}}}
    ds = parse_dataset(json.dumps(doc))
    assert [s.topic_id for s in ds.samples] == ["t1", "t2"]


def test_shared_video_is_rejected():
    with pytest.raises(ValidationError, match="video assigned to two nodes"):
        parse_dataset('{"t": [["a", "b"], ["b"]]}')


def test_empty_node_in_bare_format():
    with pytest.raises(ValidationError, match="t: node 2 empty"):
        parse_dataset('{"t": [["a"], []]}')


def test_malformed_json_reports_position():
    with pytest.raises(ParseError) as info:
        parse_dataset('{"t": [["a"],\n  ["b"}')
    assert info.value.line == 2


def test_mixed_embedding_dimensions():
    doc = {
        "embedding_dim": 2,
        "samples": [
            {
                "topic_id": "t",
                "videos": [{"id": "a", "release_time": 1, "embedding": [0, 1]}, {"id": "b", "release_time": 2, "embedding": [1]}],
                "labels": [1, 2],
                "num_nodes": 2,
            }
        ],
    }
    with pytest.raises(DimensionError, match="t"):
        parse_dataset(json.dumps(doc))


def test_extended_validation_names_topic():
    doc = {"samples": [{"topic_id": "bad-topic", "videos": [{"id": "a"}, {"id": "b"}], "labels": [1, 3], "num_nodes": 3}]}
    with pytest.raises(ValidationError, match="bad-topic.*node 2 empty"):
        parse_dataset(json.dumps(doc))


def test_write_empty_dataset():
    doc = json.loads(write_dataset(Dataset("test", 4)))
    assert doc == {"split": "test", "embedding_dim": 4, "samples": []}


def test_synthetic_roundtrip():
    ds = generate_synthetic(GenConfig(num_timelines=10, seed=3))
    back = parse_dataset(write_dataset(ds))
    assert back == ds


def test_predictions_roundtrip():
    preds = {"a": (1, 2, 2), "b": (3,)}
    assert parse_predictions(write_predictions(preds)) == preds
    with pytest.raises(ValidationError):
        parse_predictions('{"a": [1, "x"]}')


# -- validation -------------------------------------------------------------------


def test_validate_ok():
    assert validate_sample(sample([1, 1, 2], k=2)) == []


def test_validate_empty_node():
    assert validate_sample(sample([1, 1, 3], k=3)) == ["node 2 empty"]


def test_validate_k_out_of_range():
    assert validate_sample(sample([1, 1, 2], k=25)) == ["K out of range"]


def test_validate_duplicate_ids_and_label_range():
    problems = validate_sample(sample([1, 2, 4], k=3, ids=["a", "b", "a"]))
    assert any("duplicates" in p for p in problems)
    assert any("label 4" in p for p in problems)


# -- ordering -----------------------------------------------------------------------


def test_order_by_release():
    assert order_videos_by_release(sample([1, 1, 2], times=[30, 10, 20])) == [1, 2, 0]


def test_order_ties_are_identity():
    assert order_videos_by_release(sample([1, 1, 2], times=[5, 5, 5], ids=["a", "b", "c"])) == [0, 1, 2]


def test_order_ties_break_on_id():
    assert order_videos_by_release(sample([1, 1, 2], times=[5, 5, 5], ids=["c", "a", "b"])) == [1, 2, 0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ordering_is_sorted_and_keeps_validity(seed):
    s = generate_synthetic(GenConfig(num_timelines=1, node_count_range=(2, 6), seed=seed)).samples[0]
    perm = order_videos_by_release(s)
    r = reorder(s, perm)
    times = [v.release_time for v in r.videos]
    assert times == sorted(times)
    assert validate_sample(r) == []


# -- generator ---------------------------------------------------------------------------


def test_generator_is_deterministic():
    cfg = GenConfig(num_timelines=5, seed=11)
    assert write_dataset(generate_synthetic(cfg)) == write_dataset(generate_synthetic(cfg))


def test_generator_noise_free_is_ordered():
    cfg = GenConfig(num_timelines=20, video_noise_sigma=0.0, release_overlap_fraction=0.0, text_noise_sigma=0.0, seed=2)
    for s in generate_synthetic(cfg).samples:
        emb = s.embedding_matrix()
        texts = s.text_matrix()
        for row, a in zip(emb, s.labels):
            np.testing.assert_allclose(row, texts[a - 1], atol=1e-12)
        labels = reorder(s, order_videos_by_release(s)).labels
        assert list(labels) == sorted(labels)


def test_generator_hundred_timelines_validate():
    cfg = GenConfig(num_timelines=100, node_count_range=(3, 9), seed=4)
    ds = generate_synthetic(cfg)
    assert len(ds) == 100
    for s in ds.samples:
        assert validate_sample(s) == []
        assert 3 <= s.num_nodes <= 9
        np.testing.assert_allclose(np.linalg.norm(s.embedding_matrix(), axis=1), 1.0)


def test_generator_overlap_breaks_release_order():
    cfg = GenConfig(num_timelines=30, release_overlap_fraction=0.25, seed=8)
    disordered = 0
    for s in generate_synthetic(cfg).samples:
        labels = reorder(s, order_videos_by_release(s)).labels
        disordered += list(labels) != sorted(labels)
    assert disordered > 0


def test_generator_fixed_node_size():
    ds = generate_synthetic(GenConfig(num_timelines=15, videos_per_node_range=(3, 3), seed=1))
    assert set(dataset_stats(ds).videos_per_node) == {3}


@pytest.mark.parametrize(
    "bad",
    [
        {"node_count_range": (5, 3)},
        {"node_count_range": (1, 3)},
        {"videos_per_node_range": (0, 2)},
        {"video_noise_sigma": -1.0},
        {"release_overlap_fraction": 1.0},
        {"embedding_dim": 0},
    ],
)
def test_generator_rejects_bad_config(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(GenConfig(**bad))


def test_gen_config_from_json_rejects_unknown():
    assert GenConfig.from_json({"node_count_range": [2, 3]}).node_count_range == (2, 3)
    with pytest.raises(ConfigError):
        GenConfig.from_json({"bogus": 1})


# -- splitting ----------------------------------------------------------------------------


def _ds(n):
    return Dataset("x", 0, tuple(sample([1, 2], k=2, ids=[f"{i}a", f"{i}b"]) for i in range(n)))


def test_split_sizes():
    assert [len(p) for p in split_dataset(_ds(10), (0.8, 0.1, 0.1), 0)] == [8, 1, 1]


def test_split_single_sample():
    parts = split_dataset(_ds(1), (0.8, 0.1, 0.1), 0)
    assert sum(len(p) for p in parts) == 1


def test_split_reference_proportions():
    total = 9936 + 1255 + 1220
    ratios = (9936 / total, 1255 / total, 1220 / total)
    sizes = [len(p) for p in split_dataset(_ds(1000), ratios, 0)]
    for got, share in zip(sizes, ratios):
        assert abs(got - share * 1000) <= 1
    assert sum(sizes) == 1000


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(0, 2**31))
def test_split_partitions(n, seed):
    ds = Dataset("x", 0, tuple(sample([1, 2], k=2) for _ in range(n)))
    ds = Dataset("x", 0, tuple(TimelineSample(f"t{i}", s.videos, s.labels, 2) for i, s in enumerate(ds.samples)))
    parts = split_dataset(ds, (0.8, 0.1, 0.1), seed)
    ids = [s.topic_id for p in parts for s in p.samples]
    assert sorted(ids) == sorted(s.topic_id for s in ds.samples)
    for p, r in zip(parts, (0.8, 0.1, 0.1)):
        assert abs(len(p) - r * n) <= 1
    again = split_dataset(ds, (0.8, 0.1, 0.1), seed)
    assert parts == again


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.1, 0.2), (1.0, 0.0, 0.0)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        split_dataset(_ds(3), ratios, 0)


# -- stats ---------------------------------------------------------------------------------


def test_stats_empty():
    st_ = dataset_stats(Dataset("x", 0))
    assert (st_.num_timelines, st_.num_nodes, st_.num_videos) == (0, 0, 0)
    assert st_.videos_per_node == {} and st_.nodes_per_timeline == {}


def test_stats_totals_consistent():
    st_ = dataset_stats(generate_synthetic(GenConfig(num_timelines=40, seed=6)))
    assert sum(k * c for k, c in st_.videos_per_node.items()) == st_.num_videos
    assert sum(k * c for k, c in st_.nodes_per_timeline.items()) == st_.num_nodes
    assert sum(k * c for k, c in st_.videos_per_timeline.items()) == st_.num_videos
