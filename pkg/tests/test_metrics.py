"""
Tests for calibration metrics against hand-worked cases and brute-force references.
"""
import csv
import math

import numpy as np
import pytest

from mcsd.core.exceptions import ShapeError
from mcsd.services import metrics
from mcsd.services.metrics import PredictionSet


def _random_prediction_set(gen):
    n = int(gen.integers(1, 40))
    c = int(gen.integers(2, 6))
    probs = gen.dirichlet(np.full(c, 0.7), size=n)
    labels = gen.integers(0, c, size=n)
    return PredictionSet(probs, labels)


def _reference_nll(probs, labels):
    total = 0.0
    for row, y in zip(probs, labels):
        total += -math.log(max(row[y], 1e-12))
    return total / len(labels)


def _reference_brier(probs, labels):
    total = 0.0
    for row, y in zip(probs, labels):
        for k, p in enumerate(row):
            target = 1.0 if k == y else 0.0
            total += (p - target) ** 2
    return total / len(labels)


def _reference_ece(probs, labels, num_bins):
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    n = len(labels)
    total = 0.0
    for m in range(num_bins):
        confs, hits = [], []
        for row, y in zip(probs, labels):
            conf = max(row)
            if edges[m] < conf <= edges[m + 1]:
                confs.append(conf)
                hits.append(1.0 if int(np.argmax(row)) == y else 0.0)
        if confs:
            total += len(confs) / n * abs(sum(hits) / len(hits) - sum(confs) / len(confs))
    return total


@pytest.mark.unit
def test_nll_worked_example():
    preds = PredictionSet([[0.9, 0.1], [0.2, 0.8]], [0, 1])
    assert metrics.nll(preds) == pytest.approx(0.16425, abs=1e-5)
    assert metrics.nll(preds) == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-12)


@pytest.mark.unit
def test_brier_worked_example():
    preds = PredictionSet([[0.7, 0.2, 0.1]], [0])
    assert metrics.brier(preds) == pytest.approx(0.14, abs=1e-12)
    assert metrics.brier(preds, mean_over_classes=True) == pytest.approx(0.14 / 3, abs=1e-12)


@pytest.mark.unit
def test_ece_worked_example():
    """Confidence 0.6 correct and 0.8 wrong share the bin (0.5, 1]."""
    preds = PredictionSet([[0.6, 0.4], [0.8, 0.2]], [0, 1])
    score, bins = metrics.ece(preds, num_bins=2)
    assert score == pytest.approx(0.2, abs=1e-12)
    assert bins[0].count == 0 and bins[0].accuracy == 0.0 and bins[0].confidence == 0.0
    assert bins[1].count == 2
    assert bins[1].accuracy == pytest.approx(0.5)
    assert bins[1].confidence == pytest.approx(0.7)
    assert metrics.mce(bins) == pytest.approx(0.2, abs=1e-12)


@pytest.mark.unit
def test_test_error_worked_example():
    preds = PredictionSet([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]], [0, 1, 1, 1])
    assert metrics.test_error(preds) == 0.25


@pytest.mark.unit
def test_argmax_ties_go_to_lowest_class():
    preds = PredictionSet([[0.5, 0.5]], [0])
    assert metrics.test_error(preds) == 0.0


@pytest.mark.unit
def test_entropy_cdf_worked_example():
    points = metrics.entropy_cdf([0.3, 0.1, 0.2])
    assert [p[0] for p in points] == [0.1, 0.2, 0.3]
    assert [p[1] for p in points] == pytest.approx([1 / 3, 2 / 3, 1.0])


@pytest.mark.unit
def test_entropy_cdf_merges_ties_and_rejects_negatives():
    assert metrics.entropy_cdf([0.5, 0.5, 1.0, 0.0]) == [(0.0, 0.25), (0.5, 0.75), (1.0, 1.0)]
    assert metrics.entropy_cdf([]) == []
    with pytest.raises(ValueError):
        metrics.entropy_cdf([0.1, -0.2])


@pytest.mark.unit
def test_cdf_on_grid_is_right_continuous():
    values = metrics.cdf_on_grid([0.1, 0.2, 0.3], [0.0, 0.1, 0.25, 0.3, 1.0])
    np.testing.assert_allclose(values, [0.0, 1 / 3, 2 / 3, 1.0, 1.0])


@pytest.mark.unit
def test_metrics_match_brute_force_references():
    """200 random prediction sets; every metric agrees to 1e-12."""
    gen = np.random.default_rng(2024)
    for _ in range(200):
        preds = _random_prediction_set(gen)
        num_bins = int(gen.integers(1, 16))
        assert metrics.nll(preds) == pytest.approx(_reference_nll(preds.probs, preds.labels), abs=1e-12)
        assert metrics.brier(preds) == pytest.approx(_reference_brier(preds.probs, preds.labels), abs=1e-12)
        score, bins = metrics.ece(preds, num_bins)
        assert score == pytest.approx(_reference_ece(preds.probs, preds.labels, num_bins), abs=1e-12)
        assert sum(b.count for b in bins) == preds.n


@pytest.mark.unit
def test_metrics_are_permutation_invariant():
    gen = np.random.default_rng(7)
    preds = PredictionSet(gen.dirichlet(np.ones(3), size=30), gen.integers(0, 3, size=30))
    order = gen.permutation(30)
    shuffled = PredictionSet(preds.probs[order], preds.labels[order])
    assert metrics.nll(shuffled) == pytest.approx(metrics.nll(preds), abs=1e-12)
    assert metrics.brier(shuffled) == pytest.approx(metrics.brier(preds), abs=1e-12)
    assert metrics.ece(shuffled)[0] == pytest.approx(metrics.ece(preds)[0], abs=1e-12)


@pytest.mark.unit
def test_bin_boundaries_are_right_closed():
    preds = PredictionSet([[0.5, 0.5], [1.0, 0.0]], [0, 0])
    bins = metrics.reliability_bins(preds, num_bins=2)
    assert bins[0].count == 1
    assert bins[1].count == 1
    assert (bins[0].lo, bins[0].hi) == (0.0, 0.5)


@pytest.mark.unit
def test_nll_floors_zero_probability():
    preds = PredictionSet([[1.0, 0.0]], [1])
    assert metrics.nll(preds) == pytest.approx(-math.log(1e-12))


@pytest.mark.unit
def test_prediction_set_validation():
    with pytest.raises(ShapeError):
        PredictionSet([[0.5, 0.5]], [0, 1])
    with pytest.raises(ValueError):
        PredictionSet([[0.5, 0.6]], [0])
    with pytest.raises(ValueError):
        PredictionSet([[0.5, 0.5]], [2])


@pytest.mark.unit
def test_calibration_report_and_reliability_csv(tmp_path):
    preds = PredictionSet([[0.6, 0.4], [0.8, 0.2]], [0, 1])
    report = metrics.calibration_report(preds, num_bins=2, num_passes=50, entropies=np.array([0.6, 0.4]))
    assert report.ece == pytest.approx(0.2)
    assert report.test_error == 0.5
    assert report.num_passes == 50
    assert report.mean_entropy == pytest.approx(0.5)

    path = metrics.write_reliability_csv(report.bins, tmp_path / "reliability.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_lo", "bin_hi", "count", "accuracy", "confidence"]
    assert rows[1] == ["0.0", "0.5", "0", "0.0", "0.0"]
    assert rows[2][2] == "2"


@pytest.mark.unit
def test_cdf_csv(tmp_path):
    path = metrics.write_cdf_csv(metrics.entropy_cdf([0.25, 0.5]), tmp_path / "cdf.csv")
    assert path.read_text() == "entropy,cdf\n0.25,0.5\n0.5,1.0\n"
