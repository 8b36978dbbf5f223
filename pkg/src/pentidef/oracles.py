"""Brute-force reference computations used to freeze test fixtures.

Everything here is written with plain loops or arbitrary precision so it
shares no code path with the vectorized implementations it checks.
"""

from __future__ import annotations

import math
import random

import mpmath


def gaussian_sigma_mp(epsilon, delta, sensitivity, dps: int = 50) -> float:
    with mpmath.workdps(dps):
        eps, dl, s = mpmath.mpf(epsilon), mpmath.mpf(delta), mpmath.mpf(sensitivity)
        return float(mpmath.sqrt(2 * mpmath.log(mpmath.mpf("1.25") / dl)) * s / eps)


def _matmul(A, B):
    return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))]
            for i in range(len(A))]


def _transpose(A):
    return [list(r) for r in zip(*A)]


def _centered(G):
    n = len(G)
    H = [[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)]
    return _matmul(_matmul(H, G), H)


def _fro(A):
    return math.sqrt(sum(v * v for row in A for v in row))


def cka_dense(X, Y, variant="frobenius") -> float:
    X = [list(map(float, r)) for r in X]
    Y = [list(map(float, r)) for r in Y]
    Kc = _centered(_matmul(X, _transpose(X)))
    Lc = _centered(_matmul(Y, _transpose(Y)))
    if variant == "frobenius":
        num = _fro(_matmul(Kc, Lc)) ** 2
        den = _fro(_matmul(Kc, Kc)) * _fro(_matmul(Lc, Lc))
    else:
        n = len(Kc)
        dot = lambda A, B: sum(A[i][j] * B[i][j] for i in range(n) for j in range(n))
        num = dot(Kc, Lc)
        den = math.sqrt(dot(Kc, Kc) * dot(Lc, Lc))
    return num / den if den > 0 else 0.0


def krum_exhaustive(vectors, f):
    """Scores by explicit neighbour enumeration; returns (index, scores)."""
    n = len(vectors)
    m = n - f - 2
    scores = []
    for i in range(n):
        d = sorted(sum((a - b) ** 2 for a, b in zip(vectors[i], vectors[j]))
                   for j in range(n) if j != i)
        scores.append(sum(d[:m]))
    best = min(range(n), key=lambda i: (scores[i], i))
    return best, scores


def two_means_exhaustive(values):
    """Minimum SSE over every 2-partition (not only contiguous ones)."""
    n = len(values)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        a = [values[i] for i in range(n) if mask >> i & 1]
        b = [values[i] for i in range(n) if not mask >> i & 1]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        sse = sum((v - ma) ** 2 for v in a) + sum((v - mb) ** 2 for v in b)
        best = min(best, sse)
    return best


def two_means_contiguous(values):
    """Minimum SSE over contiguous splits of the sorted values."""
    s = sorted(values)
    best = math.inf
    for cut in range(1, len(s)):
        a, b = s[:cut], s[cut:]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        best = min(best, sum((v - ma) ** 2 for v in a) + sum((v - mb) ** 2 for v in b))
    return best


def mmd_double_sum(X, Y, bandwidth):
    k = lambda a, b: math.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / (2 * bandwidth ** 2))
    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(x, y) for x in X for y in Y) / (m * n)
    return max(xx + yy - 2 * xy, 0.0)


def coord_median_sorted(vectors):
    out = []
    for col in zip(*vectors):
        s = sorted(col)
        h = len(s) // 2
        out.append(s[h] if len(s) % 2 else (s[h - 1] + s[h]) / 2)
    return out


def confusion_metrics(tp, tn, fp, fn):
    acc = (tp + tn) / (tp + tn + fp + fn)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return {"accuracy": acc, "precision": p, "recall": r,
            "f1": 2 * p * r / (p + r) if p + r else 0.0}


# --------------------------------------------------------------------------
# named fixtures for the command line
# --------------------------------------------------------------------------

def _rand_matrix(rng, r, c):
    return [[rng.gauss(0, 1) for _ in range(c)] for _ in range(r)]


def fixture(name: str, seed: int = 0) -> dict:
    rng = random.Random(seed)
    if name == "gaussian-sigma":
        return {"epsilon": 1.0, "delta": 1e-5, "sensitivity": 1.0,
                "sigma": gaussian_sigma_mp(1.0, 1e-5, 1.0)}
    if name == "cka":
        X, Y = _rand_matrix(rng, 8, 4), _rand_matrix(rng, 8, 4)
        return {"X": X, "Y": Y, "frobenius": cka_dense(X, Y, "frobenius"), "trace": cka_dense(X, Y, "trace")}
    if name == "krum":
        n = rng.randint(5, 7)
        f = rng.randint(1, (n - 3) // 2)
        V = _rand_matrix(rng, n, 3)
        idx, scores = krum_exhaustive(V, f)
        return {"vectors": V, "f": f, "index": idx, "scores": scores}
    if name == "cluster":
        vals = [rng.random() for _ in range(rng.randint(2, 12))]
        return {"values": vals, "min_sse": two_means_exhaustive(vals)}
    if name == "mmd":
        X, Y = _rand_matrix(rng, 4, 2), _rand_matrix(rng, 4, 2)
        return {"X": X, "Y": Y, "bandwidth": 1.0, "mmd": mmd_double_sum(X, Y, 1.0)}
    if name == "metrics":
        return {"tp": 3, "tn": 4, "fp": 1, "fn": 2, **confusion_metrics(3, 4, 1, 2)}
    raise KeyError(name)


FIXTURES = ("gaussian-sigma", "cka", "krum", "cluster", "mmd", "metrics")
