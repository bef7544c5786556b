"""
Toy datasets, deterministic splits and CSV ingestion.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import csv
import logging
import numpy as np
from sklearn.datasets import make_blobs, make_moons
from sklearn.preprocessing import StandardScaler

from ..core.exceptions import DatasetParseError, ShapeError
from ..models import SplitSpec
from ..utils import rng
from ..utils.artifacts import read_json, write_csv, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Features (N x d), integer labels in ``[0, num_classes)`` and provenance."""

    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    seed: int = 0
    num_classes: Optional[int] = None
    out_of_distribution: bool = False

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ShapeError(f"{features.shape[0]} feature rows but {labels.shape} labels")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return replace(self, features=self.features[indices], labels=self.labels[indices],
                       name=name or self.name)

    def metadata(self) -> Dict[str, Any]:
        return {"name": self.name, "n": self.n, "d": self.dim, "C": self.num_classes,
                "seed": self.seed, "out_of_distribution": self.out_of_distribution}

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def gen_moons(n: int, noise_sigma: float = 0.0, seed: int = 0) -> Dataset:
    """Two interleaving unit half-circles; ``n // 2`` points in class 0."""
    if n < 2:
        raise ValueError("two moons need at least 2 samples")
    x, y = make_moons(n_samples=n, noise=noise_sigma or None, random_state=seed)
    return Dataset(x, y, name="moons", seed=seed, num_classes=2)


def gen_blobs(n: int, centers: Sequence[Sequence[float]], sigma: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters; class ``k`` is the cluster around ``centers[k]``."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ValueError("need at least 2 centers")
    x, y = make_blobs(n_samples=n, centers=centers, cluster_std=sigma, random_state=seed)
    return Dataset(x, y, name="blobs", seed=seed, num_classes=centers.shape[0])


def gen_ood(base: Dataset, shift: Sequence[float], scale: float = 1.0, seed: int = 0,
            noise: float = 0.0) -> Dataset:
    """
    Affinely shifted companion ``x * scale + shift`` of ``base``.

    Labels are kept and the result is marked out-of-distribution. ``noise``
    adds seeded isotropic jitter (none by default).
    """
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != (base.dim,):
        raise ShapeError(f"shift has shape {shift.shape}, features have dimension {base.dim}")
    x = base.features * scale + shift
    if noise > 0.0:
        x = x + rng.stream(seed, rng.DATA).normal(0.0, noise, size=x.shape)
    return replace(base, features=x, name=f"{base.name}-ood", seed=seed, out_of_distribution=True)


def gen_mirror_pairs(n_pairs: int, dim: int = 2, radius: float = 2.0, sigma: float = 0.3,
                     seed: int = 0) -> Tuple[Dataset, np.ndarray, np.ndarray]:
    """
    Symmetric two-identity verification data.

    Identities sit at the mirror prototypes ``+p`` and ``-p`` (``|p| = radius``
    along the first axis). Returns a balanced labelled training set of
    ``2 * n_pairs`` samples and ``n_pairs`` (accomplice, impostor) pairs drawn
    from the +p and -p identities respectively.
    """
    gen = rng.stream(seed, rng.DATA)
    prototype = np.zeros(dim)
    prototype[0] = radius
    train_x = np.concatenate([
        prototype + sigma * gen.standard_normal((n_pairs, dim)),
        -prototype + sigma * gen.standard_normal((n_pairs, dim)),
    ])
    train_y = np.repeat([0, 1], n_pairs)
    accomplices = prototype + sigma * gen.standard_normal((n_pairs, dim))
    impostors = -prototype + sigma * gen.standard_normal((n_pairs, dim))
    train = Dataset(train_x, train_y, name="mirror", seed=seed, num_classes=2)
    return train, accomplices, impostors


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Disjoint train/validation/test partition.

    Validation and test sizes are the rounded fractions of ``n``; the
    remainder goes to train.
    """
    n = ds.n
    n_val = int(round(n * spec.val_frac))
    n_test = int(round(n * spec.test_frac))
    if n_val + n_test > n:
        n_test = n - n_val
    order = rng.stream(spec.seed, rng.DATA, 1).permutation(n)
    val_idx = order[:n_val]
    test_idx = order[n_val:n_val + n_test]
    train_idx = order[n_val + n_test:]
    return (ds.subset(np.sort(train_idx), f"{ds.name}-train"),
            ds.subset(np.sort(val_idx), f"{ds.name}-val"),
            ds.subset(np.sort(test_idx), f"{ds.name}-test"))


def subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Deterministic subset of ``max(2, round(fraction * n))`` samples."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(2, int(round(fraction * ds.n)))
    idx = np.sort(rng.stream(seed, rng.DATA, 2).permutation(ds.n)[:k])
    return ds.subset(idx, f"{ds.name}-{fraction:g}")


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine standardization fitted on a training split."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Standardizer":
        scaler = StandardScaler().fit(ds.features)
        return cls(np.asarray(scaler.mean_, dtype=np.float64), np.asarray(scaler.scale_, dtype=np.float64))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, ds: Dataset) -> Dataset:
        if ds.dim != self.mean.shape[0]:
            raise ShapeError(f"standardizer fitted on {self.mean.shape[0]} features, got {ds.dim}")
        return replace(ds, features=self.apply(ds.features))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, List[float]]) -> "Standardizer":
        return cls(np.array(payload["mean"], dtype=np.float64), np.array(payload["scale"], dtype=np.float64))


# -- CSV -----------------------------------------------------------------

def save_csv(ds: Dataset, path: Union[str, Path], sidecar: bool = True) -> Path:
    """Write ``f0..f{d-1},label`` rows and, optionally, a ``.meta.json`` sidecar."""
    header = [f"f{j}" for j in range(ds.dim)] + ["label"]
    rows = ([*row.tolist(), int(label)] for row, label in zip(ds.features, ds.labels))
    path = write_csv(path, header, rows)
    if sidecar:
        write_json(metadata_path(path), ds.metadata())
    return path


def metadata_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_suffix(".meta.json")


def load_csv(path: Union[str, Path], num_classes: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """
    Parse a dataset CSV.

    Raises:
        DatasetParseError: bad header, ragged row, non-numeric cell, label out
            of range, or no samples (with the offending line number)
    """
    path = Path(path)
    features: List[List[float]] = []
    labels: List[int] = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DatasetParseError("missing header", line=1)
        d = len(header) - 1
        expected = [f"f{j}" for j in range(d)] + ["label"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DatasetParseError(f"header must be {','.join(expected) if d >= 1 else 'f0,...,label'}", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DatasetParseError(f"expected {d + 1} cells, got {len(row)}", line=line_no)
            try:
                values = [float(cell) for cell in row[:d]]
            except ValueError:
                raise DatasetParseError("non-numeric feature cell", line=line_no) from None
            if not all(np.isfinite(values)):
                raise DatasetParseError("non-finite feature cell", line=line_no)
            try:
                label = int(row[d])
            except ValueError:
                raise DatasetParseError(f"label {row[d]!r} is not an integer", line=line_no) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetParseError(f"label {label} out of range", line=line_no)
            features.append(values)
            labels.append(label)
    if not labels:
        raise DatasetParseError("no samples")
    meta_name, seed = name or path.stem, 0
    meta = metadata_path(path)
    if meta.exists():
        info = read_json(meta)
        meta_name = name or info.get("name", meta_name)
        seed = int(info.get("seed", 0))
        if num_classes is None and info.get("C") is not None:
            num_classes = max(int(info["C"]), max(labels) + 1)
    return Dataset(np.array(features, dtype=np.float64), np.array(labels, dtype=np.int64),
                   name=meta_name, seed=seed, num_classes=num_classes)


def save_pairs_csv(accomplices: np.ndarray, impostors: np.ndarray, path: Union[str, Path]) -> Path:
    """Write verification pairs as ``a0..a{d-1},b0..b{d-1}`` rows."""
    if accomplices.shape != impostors.shape:
        raise ShapeError(f"accomplice shape {accomplices.shape} differs from impostor shape {impostors.shape}")
    d = accomplices.shape[1]
    header = [f"a{j}" for j in range(d)] + [f"b{j}" for j in range(d)]
    rows = ([*a.tolist(), *b.tolist()] for a, b in zip(accomplices, impostors))
    return write_csv(path, header, rows)


def load_pairs_csv(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parse (accomplice, impostor) pairs.

    Raises:
        DatasetParseError: bad header, ragged or non-numeric row, or no pairs
    """
    rows: List[List[float]] = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, None) or []]
        d = len(header) // 2
        expected = [f"a{j}" for j in range(d)] + [f"b{j}" for j in range(d)]
        if d < 1 or header != expected:
            raise DatasetParseError("header must be a0,...,a{d-1},b0,...,b{d-1}", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 * d:
                raise DatasetParseError(f"expected {2 * d} cells, got {len(row)}", line=line_no)
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DatasetParseError("non-numeric cell", line=line_no) from None
            if not all(np.isfinite(values)):
                raise DatasetParseError("non-finite cell", line=line_no)
            rows.append(values)
    if not rows:
        raise DatasetParseError("no samples")
    table = np.array(rows, dtype=np.float64)
    return table[:, :d], table[:, d:]
