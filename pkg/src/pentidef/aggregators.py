"""Baseline aggregation rules: FedAvg, Krum, coordinate median, FedCC, FLARE-style MMD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_matrix, check_same_spec
from .neuralcore import ModelWeights, forward


def weights_of(u) -> ModelWeights:
    return u.weights if hasattr(u, "weights") else u


def _stack(updates):
    models = check_same_spec([weights_of(u) for u in updates])
    return models[0].spec, np.stack([m.flat() for m in models])


def fed_avg(updates) -> ModelWeights:
    """Unweighted coordinate-wise mean."""
    updates = list(updates)
    if not updates:
        raise ValueError("fed_avg needs at least one update")
    spec, V = _stack(updates)
    return ModelWeights.from_flat(spec, V.mean(axis=0))


def krum_scores(vectors, f: int) -> np.ndarray:
    V = np.asarray(vectors, dtype=np.float64)
    n = V.shape[0]
    if f < 0 or n < 2 * f + 3:
        raise ValueError(f"Krum needs n >= 2f + 3, got n={n}, f={f}")
    diff = V[:, None, :] - V[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(d2[i], i)
        scores[i] = np.sort(others)[:m].sum()
    return scores


def krum_index(updates, f: int) -> int:
    """Index of the Krum winner (lowest index on ties)."""
    _, V = _stack(updates)
    return int(np.argmin(krum_scores(V, f)))


def krum(updates, f: int) -> ModelWeights:
    updates = list(updates)
    return weights_of(updates[krum_index(updates, f)]).copy()


def coord_median(updates) -> ModelWeights:
    updates = list(updates)
    if not updates:
        raise ValueError("coord_median needs at least one update")
    spec, V = _stack(updates)
    # numpy averages the two middle values for even counts
    return ModelWeights.from_flat(spec, np.median(V, axis=0))


def fedcc(global_w: ModelWeights, updates, variant: str = "frobenius"):
    """CKA filter on the raw normalized PLRs (no autoencoder)."""
    from .defense import run_pentidef

    res = run_pentidef(global_w, updates, use_autoencoder=False, variant=variant)
    return res.aggregate, res.scores, res.verdict


# --------------------------------------------------------------------------
# FLARE-style trust from maximum mean discrepancy
# --------------------------------------------------------------------------

def _sq_dists(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(X, Y) -> float:
    Z = np.vstack([X, Y])
    d = np.sqrt(_sq_dists(Z, Z))
    iu = np.triu_indices(Z.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def mmd(X, Y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, clamped at zero."""
    X = check_matrix(X, name="X", allow_empty=False)
    Y = check_matrix(Y, n_cols=X.shape[1], name="Y", allow_empty=False)
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least 2 samples per set")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be > 0")
    g = -0.5 / bw ** 2
    kxx = np.exp(g * _sq_dists(X, X))
    kyy = np.exp(g * _sq_dists(Y, Y))
    kxy = np.exp(g * _sq_dists(X, Y))
    val = ((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
           + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
           - 2.0 * kxy.mean())
    return float(max(val, 0.0))


def penultimate_activations(w: ModelWeights, X) -> np.ndarray:
    acts, _ = forward(weights_of(w), X)
    return acts[-2]


def knn_trust(D, k: int) -> np.ndarray:
    """Count how often each client is among the others' k nearest; sums to 1.

    A client's vote at the k-th distance is shared evenly among ties, so
    identical clients get identical trust.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    k = max(1, min(k, n - 1))
    votes = np.zeros(n)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        d = D[i, others]
        cut = np.sort(d)[k - 1]
        below = others[d < cut]
        tied = others[d == cut]
        votes[below] += 1.0
        votes[tied] += (k - below.size) / tied.size
    total = votes.sum()
    return votes / total if total > 0 else np.full(n, 1.0 / n)


@dataclass(frozen=True)
class FlareResult:
    aggregate: ModelWeights
    trust: np.ndarray
    distances: np.ndarray


def flare_aggregate(updates, probe, k: int | None = None) -> FlareResult:
    """Trust-weighted average driven by pairwise MMD of probe activations."""
    updates = [weights_of(u) for u in updates]
    X = probe.features if hasattr(probe, "features") else probe
    X = check_matrix(X, name="probe")
    if X.shape[0] == 0:
        raise ValueError("probe set is empty")
    spec, V = _stack(updates)
    n = len(updates)
    k = max(1, n // 2) if k is None else k
    reps = [penultimate_activations(u, X) for u in updates]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = mmd(reps[i], reps[j])
    trust = knn_trust(D, k)
    return FlareResult(ModelWeights.from_flat(spec, trust @ V), trust, D)
