"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np


def check_matrix(X, n_cols: int | None = None, name: str = "X", allow_empty: bool = True) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :] if n_cols is not None and X.size == n_cols else X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if n_cols is not None and X.shape[1] != n_cols:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {n_cols}")
    if not allow_empty and X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_binary_labels(y, n: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        y = y.ravel()
    if n is not None and y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for {n} samples")
    yf = y.astype(np.float64)
    bad = ~np.isin(yf, (0.0, 1.0))
    if np.any(bad):
        raise ValueError(f"labels must be 0/1, found {np.unique(y[bad])[:5].tolist()}")
    return yf


def check_same_spec(models, reference=None):
    """All models must share one LayerSpec (and match ``reference`` if given)."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    spec = reference.spec if reference is not None else models[0].spec
    for i, m in enumerate(models):
        if m.spec != spec:
            raise ValueError(f"model {i} has spec {m.spec.sizes}, expected {spec.sizes}")
    return models


def check_probability(value: float, name: str, open_low=True, open_high=True) -> float:
    value = float(value)
    lo_ok = value > 0 if open_low else value >= 0
    hi_ok = value < 1 if open_high else value <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in {'(' if open_low else '['}0, 1{')' if open_high else ']'}, got {value}")
    return value
