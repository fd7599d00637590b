import xml.etree.ElementTree as ET
from fractions import Fraction

import numpy as np
import pytest

from fusenet.metrics import (CMCResult, aggregate_runs, cmc_curve, emit_cmc_plot, rank_one_accuracy, read_metrics_csv,
                             recall_at_k, true_class_ranks, write_metrics_csv)


def oracle_recall(scores, labels, K):
    """Sort each score row, find the worst position among ties with the true class."""
    per_class = {}
    for row, y in zip(scores, labels):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j != y))
        # pessimistic: every tied competitor goes ahead of the true class
        rank = sum(1 for v in row if v >= row[y])
        assert order.index(y) + 1 <= rank
        per_class.setdefault(int(y), []).append(rank <= K)
    return float(sum(Fraction(sum(v), len(v)) for v in per_class.values()) / len(per_class))


def oracle_rank_one(scores, labels):
    hits = 0
    for row, y in zip(scores, labels):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        hits += best == y
    return hits / len(labels)


def random_instance(rng):
    k = int(rng.integers(2, 21))
    n = int(rng.integers(k, 201))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    scores = rng.random((n, k))
    if rng.random() < 0.5:  # coarse scores force ties
        scores = np.round(scores * 4) / 4
    return scores, labels


def test_recall_hand_example():
    assert recall_at_k([([0.9, 0.1], 0), ([0.6, 0.4], 1)], K=1) == 0.5
    assert recall_at_k([([0.9, 0.1], 0), ([0.6, 0.4], 1)], K=2) == 1.0


def test_recall_ties_take_worst_rank():
    assert true_class_ranks(np.array([[0.5, 0.5, 0.0]]), np.array([0])).tolist() == [2]
    assert recall_at_k(np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([0, 1]), K=1) == 0.5


def test_recall_missing_class_is_named():
    with pytest.raises(ValueError, match="class 2"):
        recall_at_k(np.eye(3)[:2], np.array([0, 1]), K=1)


def test_recall_bad_k():
    with pytest.raises(ValueError):
        recall_at_k(np.eye(3), np.arange(3), K=4)


def test_rank_one_examples():
    assert rank_one_accuracy(np.eye(4), np.arange(4)) == 1.0
    assert rank_one_accuracy(np.eye(4), np.array([0, 0, 0, 0])) == 0.25


def test_rank_one_differs_from_class_average_under_imbalance():
    scores = np.array([[1, 0], [1, 0], [1, 0], [1, 0]], dtype=float)
    labels = np.array([0, 0, 0, 1])
    assert rank_one_accuracy(scores, labels) == 0.75
    assert recall_at_k(scores, labels, K=1) == 0.5


def test_metrics_match_oracles_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        scores, labels = random_instance(rng)
        k = scores.shape[1]
        curve = cmc_curve(scores, labels)
        for K in range(1, k + 1):
            assert recall_at_k(scores, labels, K) == oracle_recall(scores, labels, K)
            assert curve.at(K) == oracle_recall(scores, labels, K)
        assert rank_one_accuracy(scores, labels) == oracle_rank_one(scores, labels)
        assert np.all(np.diff(curve.recall) >= 0)
        assert curve.recall[-1] == 1.0


def test_balanced_recall_at_one_equals_rank_one_without_ties():
    rng = np.random.default_rng(5)
    scores = rng.random((40, 8))
    labels = np.repeat(np.arange(8), 5)
    assert recall_at_k(scores, labels, 1) == rank_one_accuracy(scores, labels)


def test_metrics_are_order_invariant():
    rng = np.random.default_rng(6)
    scores, labels = rng.random((60, 6)), np.tile(np.arange(6), 10)
    perm = rng.permutation(60)
    np.testing.assert_array_equal(cmc_curve(scores, labels).recall, cmc_curve(scores[perm], labels[perm]).recall)


def test_aggregate_single_and_pair():
    one = CMCResult(np.array([0.8, 1.0]), 10, 2, [0])
    agg = aggregate_runs([one])
    np.testing.assert_array_equal(agg.recall, one.recall)
    assert not agg.std.any()
    pair = aggregate_runs([one, CMCResult(np.array([1.0, 1.0]), 10, 2, [1])])
    assert abs(pair.at(1) - 0.9) < 1e-15 and abs(pair.std[0] - 0.1) < 1e-15
    assert pair.seeds == [0, 1]


def test_aggregate_matches_recomputation():
    rng = np.random.default_rng(7)
    runs = []
    for s in range(5):
        scores = rng.random((30, 5))
        runs.append(cmc_curve(scores, np.tile(np.arange(5), 6), seeds=[s]))
    agg = aggregate_runs(runs)
    stack = np.stack([r.recall for r in runs])
    np.testing.assert_array_equal(agg.recall, stack.mean(axis=0))
    np.testing.assert_array_equal(agg.std, stack.std(axis=0))
    assert np.all(np.diff(agg.recall) >= 0)


def test_aggregate_rejects_mismatch():
    with pytest.raises(ValueError):
        aggregate_runs([CMCResult(np.ones(2), 1, 2), CMCResult(np.ones(3), 1, 3)])


def test_metrics_csv_round_trip(tmp_path):
    res = CMCResult(np.array([0.5, 0.75, 1.0]), 4, 3)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [("seed0", "weighted", res)])
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,curve_name,K,recall,std"
    assert lines[1] == "seed0,weighted,1,0.500000,0.000000"
    assert read_metrics_csv(path)["seed0"]["weighted"][2] == (0.75, 0.0)


def polylines(path):
    root = ET.parse(path).getroot()
    return root.findall(".//{http://www.w3.org/2000/svg}polyline")


def test_svg_single_flat_curve_is_horizontal(tmp_path):
    path = tmp_path / "one.svg"
    emit_cmc_plot({"flat": CMCResult(np.ones(5), 1, 5)}, path)
    (line,) = polylines(path)
    ys = {p.split(",")[1] for p in line.get("points").split()}
    assert len(ys) == 1
    # Recall 1.0 sits on the top edge of the plotting area
    assert float(ys.pop()) == 30.0


def test_svg_two_curves_two_legend_entries(tmp_path):
    path = tmp_path / "two.svg"
    emit_cmc_plot({"weighted": CMCResult(np.array([0.5, 1.0]), 2, 2),
                   "multi_abstract": CMCResult(np.array([0.7, 1.0]), 2, 2)}, path)
    assert len(polylines(path)) == 2
    text = path.read_text()
    assert "weighted" in text and "multi_abstract" in text


def test_svg_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_cmc_plot({}, tmp_path / "none.svg")
