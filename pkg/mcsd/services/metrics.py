"""
Calibration and uncertainty-quality metrics.

All metrics consume MC-averaged class probabilities. Confidence bins are the
``M`` equal-width intervals ``(lo, hi]`` partitioning ``(0, 1]``.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union
import logging
import numpy as np

from ..core.exceptions import ShapeError
from ..models import CalibrationReport, ReliabilityBin
from ..utils.artifacts import write_csv
from .numerics import as_matrix

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9

CdfPoint = Tuple[float, float]


@dataclass(frozen=True)
class PredictionSet:
    """Predicted class probabilities (N x C) with the true labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = as_matrix(self.probs, "probs")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != probs.shape[0]:
            raise ShapeError(f"{probs.shape[0]} probability rows but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
        if probs.size and (probs.min() < -SIMPLEX_TOL or probs.max() > 1.0 + SIMPLEX_TOL):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("probability rows must sum to 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def true_class_probs(self) -> np.ndarray:
        return self.probs[np.arange(self.n), self.labels]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1) == self.labels


def nll(preds: PredictionSet) -> float:
    """Mean negative log of the true-class probability, floored at ``PROB_FLOOR``."""
    return float(-np.mean(np.log(np.maximum(preds.true_class_probs, PROB_FLOOR))))


def brier(preds: PredictionSet, mean_over_classes: bool = False) -> float:
    """
    Multiclass Brier score: squared error against the one-hot label, summed
    over classes and averaged over samples.

    Args:
        preds: predictions to score
        mean_over_classes: divide by ``C`` as well (compatibility convention)
    """
    onehot = np.eye(preds.num_classes)[preds.labels]
    per_sample = np.sum((preds.probs - onehot) ** 2, axis=1)
    score = float(np.mean(per_sample))
    return score / preds.num_classes if mean_over_classes else score


def bin_edges(num_bins: int) -> np.ndarray:
    if num_bins < 1:
        raise ValueError("need at least one bin")
    return np.linspace(0.0, 1.0, num_bins + 1)


def reliability_bins(preds: PredictionSet, num_bins: int = 10) -> List[ReliabilityBin]:
    """Per-bin sample count, accuracy and mean confidence; empty bins report zeros."""
    edges = bin_edges(num_bins)
    conf = preds.confidence
    correct = preds.correct
    # searchsorted(side="left") puts conf == edge into the bin that edge closes
    index = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    bins = []
    for m in range(num_bins):
        members = index == m
        count = int(members.sum())
        bins.append(ReliabilityBin(
            lo=float(edges[m]),
            hi=float(edges[m + 1]),
            count=count,
            accuracy=float(correct[members].mean()) if count else 0.0,
            confidence=float(conf[members].mean()) if count else 0.0,
        ))
    return bins


def ece(preds: PredictionSet, num_bins: int = 10) -> Tuple[float, List[ReliabilityBin]]:
    """Expected calibration error and the reliability bins it was computed from."""
    bins = reliability_bins(preds, num_bins)
    if preds.n == 0:
        return 0.0, bins
    total = sum(b.count / preds.n * abs(b.accuracy - b.confidence) for b in bins if b.count)
    return float(total), bins


def mce(bins: Sequence[ReliabilityBin]) -> float:
    """Maximum calibration error over the non-empty bins."""
    gaps = [abs(b.accuracy - b.confidence) for b in bins if b.count]
    return float(max(gaps)) if gaps else 0.0


def test_error(preds: PredictionSet) -> float:
    """Fraction misclassified; argmax ties go to the lowest class index."""
    if preds.n == 0:
        return 0.0
    return float(np.mean(~preds.correct))


def entropy_cdf(entropies: Iterable[float]) -> List[CdfPoint]:
    """
    Empirical CDF sampled at the distinct data points.

    Returns ``(entropy, cdf)`` pairs in ascending order, with
    ``cdf = #{e_i <= entropy} / N``.
    """
    values = np.asarray(list(entropies), dtype=np.float64)
    if values.size == 0:
        return []
    if np.any(values < 0.0):
        raise ValueError("entropies must be non-negative")
    distinct, counts = np.unique(values, return_counts=True)
    cdf = np.cumsum(counts) / values.size
    return [(float(e), float(c)) for e, c in zip(distinct, cdf)]


def cdf_on_grid(entropies: Iterable[float], grid: Iterable[float]) -> np.ndarray:
    """Evaluate the right-continuous empirical CDF of ``entropies`` at ``grid``."""
    values = np.sort(np.asarray(list(entropies), dtype=np.float64))
    grid = np.asarray(list(grid), dtype=np.float64)
    if values.size == 0:
        return np.zeros_like(grid)
    return np.searchsorted(values, grid, side="right") / values.size


def mean_entropy(entropies: Iterable[float]) -> float:
    values = np.asarray(list(entropies), dtype=np.float64)
    return float(values.mean()) if values.size else 0.0


def calibration_report(preds: PredictionSet, num_bins: int = 10, num_passes: int = 1,
                       entropies: Optional[np.ndarray] = None) -> CalibrationReport:
    """Every calibration metric for one prediction set."""
    score, bins = ece(preds, num_bins)
    report = CalibrationReport(
        test_error=test_error(preds),
        nll=nll(preds),
        brier=brier(preds),
        ece=score,
        mce=mce(bins),
        bins=bins,
        num_bins=num_bins,
        num_passes=num_passes,
        mean_entropy=mean_entropy(entropies) if entropies is not None else 0.0,
    )
    logger.info("Calibration report", extra={"nll": report.nll, "ece": report.ece,
                                             "test_error": report.test_error, "n": preds.n})
    return report


def write_reliability_csv(bins: Sequence[ReliabilityBin], path: Union[str, Path]) -> Path:
    rows = ((b.lo, b.hi, b.count, b.accuracy, b.confidence) for b in bins)
    return write_csv(path, ["bin_lo", "bin_hi", "count", "accuracy", "confidence"], rows)


def write_cdf_csv(points: Sequence[CdfPoint], path: Union[str, Path]) -> Path:
    return write_csv(path, ["entropy", "cdf"], points)
