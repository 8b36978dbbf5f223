"""Dataset loading, synthetic traffic generation, splitting and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from ._validation import check_binary_labels, check_matrix


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = check_matrix(self.features, name="features")
        y = check_binary_labels(self.labels, n=X.shape[0]).astype(np.int64)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.feature_names)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.feature_names)


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str = "iid"
    n_clients: int = 20
    seed: int = 0
    alpha: float = 0.5

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


def load_csv(path, label_column: str = "label") -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataFormatError(f"{path}: no label column {label_column!r} in header")
        li = header.index(label_column)
        names = tuple(h for i, h in enumerate(header) if i != li)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            lab = vals.pop(li)
            if lab not in (0.0, 1.0):
                raise DataFormatError(f"{path}:{lineno}: label {lab:g} is not 0/1")
            rows.append(vals)
            labels.append(int(lab))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels), names)


def synth_generate(n: int, d: int, separation: float, class_ratio: float = 0.5,
                   seed: int = 0) -> Dataset:
    """Two unit-variance Gaussian classes whose means are ``separation`` apart.

    Class means sit at ``-s/2`` and ``+s/2`` along a random unit direction.
    The positive (attack) class gets ``round(class_ratio * n)`` samples.
    """
    if n < 2 or d < 1:
        raise ValueError("need n >= 2 and d >= 1")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    if not 0.0 <= class_ratio <= 1.0:
        raise ValueError("class_ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    n_pos = int(round(class_ratio * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(n)]
    sign = np.where(labels == 1, 0.5, -0.5)
    X = rng.standard_normal((n, d)) + np.outer(sign * separation, direction)
    names = tuple(f"f{i}" for i in range(d))
    return Dataset(X, labels, names)


def split_train_test(data: Dataset, test_fraction: float = 0.3, seed: int = 0):
    """Stratified split; test size is ``round(test_fraction * n)``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(data)
    n_test = int(round(test_fraction * n))
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(data.labels == c)) for c in (0, 1)]
    # per-class quotas by largest remainder so they sum to n_test exactly
    raw = np.array([len(ix) * test_fraction for ix in by_class])
    quota = np.floor(raw).astype(int)
    for c in np.argsort(-(raw - quota), kind="stable")[: n_test - quota.sum()]:
        quota[c] += 1
    test_idx = np.concatenate([ix[:q] for ix, q in zip(by_class, quota)])
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


def standardize(train: Dataset, *others: Dataset):
    """z-score every dataset with the training statistics."""
    scaler = StandardScaler().fit(train.features)
    out = [Dataset(scaler.transform(d.features), d.labels, d.feature_names)
           for d in (train, *others)]
    return out[0] if not others else tuple(out)


def partition(train: Dataset, plan: PartitionPlan, max_resample: int = 1000) -> list[Dataset]:
    """Split ``train`` across clients, IID or with Dirichlet label skew."""
    n = len(train)
    k = plan.n_clients
    if n < k:
        raise ValueError(f"{n} samples cannot cover {k} clients")
    rng = np.random.default_rng(plan.seed)
    if plan.scheme == "iid":
        shards = np.array_split(rng.permutation(n), k)
        return [train.subset(np.sort(s)) for s in shards]
    return [train.subset(np.sort(s)) for s in _dirichlet_shards(train.labels, k, plan.alpha, rng, max_resample)]


def _dirichlet_shards(labels, k, alpha, rng, max_resample):
    by_class = [np.flatnonzero(labels == c) for c in (0, 1)]
    if any(len(ix) < k for ix in by_class):
        raise ValueError("each class needs at least one sample per client")
    shards = [[] for _ in range(k)]
    for ix in by_class:
        ix = rng.permutation(ix)
        # each client draws its share of this class; one sample is reserved per client
        for _ in range(max_resample):
            props = rng.dirichlet(np.full(k, alpha))
            if np.all(np.isfinite(props)):
                break
        extra = len(ix) - k
        counts = np.floor(props * extra).astype(int)
        for j in np.argsort(-(props * extra - counts), kind="stable")[: extra - counts.sum()]:
            counts[j] += 1
        counts += 1
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(k):
            shards[j].append(ix[bounds[j]:bounds[j + 1]])
    return [np.concatenate(s) for s in shards]
