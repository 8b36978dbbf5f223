"""Latent-space poisoning filter.

Each round the penultimate-layer weight matrix (PLR) of the global model and
of every submitted local model is compressed row-by-row by an autoencoder into
a latent representation (LSR). Local LSRs are compared to the global LSR with
centered kernel alignment, the scores are split into two groups with 1-D
2-means, and only the majority group is averaged into the next global model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_same_spec
from .aggregators import fed_avg, weights_of as _weights_of
from .neuralcore import (LayerSpec, ModelWeights, SpecError, _Optimizer,
                         backward, forward, init_network, TrainConfig)

SPREAD_EPS = 1e-9
DEFAULT_CODE_ACTIVATION = "tanh"
# a 2-means split is only acted on when both hold; calibrated on clean and
# attacked runs, see the decisions notes
DEFAULT_MIN_GAP = 0.02
DEFAULT_MIN_SEPARATION = 5.0


# --------------------------------------------------------------------------
# PLR / LSR
# --------------------------------------------------------------------------

def extract_plr(w: ModelWeights) -> np.ndarray:
    """Weight matrix of the last hidden layer (rows are its neurons)."""
    w = _weights_of(w)
    if w.spec.n_layers < 3:
        raise SpecError("model is too shallow to have a penultimate layer")
    return w.layers[-2][0].copy()


class AutoEncoder(TransformerMixin, BaseEstimator):
    """Row autoencoder ``in -> h -> h -> k -> h -> h -> in`` trained on MSE.

    Hidden layers are ReLU. The code layer uses ``code_activation``; a
    saturating choice keeps the encoding from being positively homogeneous,
    so a uniformly rescaled model does not map to a rescaled (and therefore
    CKA-identical) latent matrix. The reconstruction layer is linear.
    """

    def __init__(self, bottleneck=None, hidden=None, epochs=50, learning_rate=1e-2,
                 batch_size=32, code_activation=DEFAULT_CODE_ACTIVATION, random_state=0):
        self.bottleneck = bottleneck
        self.code_activation = code_activation
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _dims(self, d):
        k = self.bottleneck if self.bottleneck is not None else d // 2
        if not 1 <= k < d:
            raise ValueError(f"bottleneck {k} must be in [1, {d - 1}] for input width {d}")
        h = self.hidden if self.hidden is not None else max(k, (d + k) // 2)
        return int(k), int(h)

    def fit(self, X, y=None):
        X = check_matrix(X, allow_empty=False)
        d = X.shape[1]
        k, h = self._dims(d)
        self.n_features_in_ = d
        self.bottleneck_ = k
        self.encoder_ = init_network(LayerSpec((d, h, h, k), self.code_activation), self.random_state)
        self.decoder_ = init_network(LayerSpec((k, h, h, d), "identity"), self.random_state + 1)
        cfg = TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                          batch_size=self.batch_size, optimizer="adam")
        params = [a for net in (self.encoder_, self.decoder_) for pair in net.layers for a in pair]
        opt = _Optimizer(cfg, [p.shape for p in params])
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = [self._mse(X)]
        for _ in range(self.epochs):
            order = rng.permutation(X.shape[0])
            for start in range(0, X.shape[0], self.batch_size):
                grads = self._grads(X[order[start:start + self.batch_size]])
                opt.step(params, grads)
            self.loss_curve_.append(self._mse(X))
        return self

    def _grads(self, Xb):
        enc_acts, code = forward(self.encoder_, Xb)
        dec_acts, recon = forward(self.decoder_, code)
        g = 2.0 * (recon - Xb) / Xb.size
        dec_grads, g_code = backward(self.decoder_, dec_acts, g, need_input_grad=True)
        if self.code_activation == "sigmoid":
            g_code = g_code * code * (1.0 - code)
        elif self.code_activation == "tanh":
            g_code = g_code * (1.0 - code ** 2)
        elif self.code_activation == "relu":
            g_code = g_code * (code > 0)
        enc_grads = backward(self.encoder_, enc_acts, g_code)
        return [a for pair in enc_grads + dec_grads for a in pair]

    def _mse(self, X):
        return float(np.mean((self._reconstruct(X) - X) ** 2))

    def _reconstruct(self, X):
        return forward(self.decoder_, forward(self.encoder_, X)[1])[1]

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_matrix(X, n_cols=self.n_features_in_)
        return forward(self.encoder_, X)[1]

    def inverse_transform(self, Z):
        check_is_fitted(self, "decoder_")
        return forward(self.decoder_, check_matrix(Z, n_cols=self.bottleneck_))[1]

    def reconstruction_error(self, X) -> float:
        check_is_fitted(self, "encoder_")
        return self._mse(check_matrix(X, n_cols=self.n_features_in_))


@dataclass(frozen=True)
class AEConfig:
    bottleneck: int | None = None
    hidden: int | None = None
    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 32
    code_activation: str = DEFAULT_CODE_ACTIVATION


def train_autoencoder(plr_pool, ae_cfg: AEConfig | None = None, seed: int = 0) -> AutoEncoder:
    pool = [np.asarray(p, dtype=np.float64) for p in plr_pool]
    if not pool:
        raise ValueError("PLR pool is empty")
    shape = pool[0].shape
    for i, p in enumerate(pool):
        if p.shape != shape:
            raise ValueError(f"PLR {i} has shape {p.shape}, expected {shape}")
    cfg = ae_cfg or AEConfig()
    ae = AutoEncoder(bottleneck=cfg.bottleneck, hidden=cfg.hidden, epochs=cfg.epochs,
                     learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                     code_activation=cfg.code_activation, random_state=seed)
    return ae.fit(np.vstack(pool))


def encode_lsr(ae: AutoEncoder | None, plr) -> np.ndarray:
    """Encode every PLR row; ``ae=None`` is the identity map."""
    plr = check_matrix(plr)
    return plr.copy() if ae is None else ae.transform(plr)


# --------------------------------------------------------------------------
# similarity
# --------------------------------------------------------------------------

def normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    c = m - m.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    # rows that vanish after centering stay zero
    return np.divide(c, norms, out=np.zeros_like(c), where=norms > 1e-300)


def _centered_grams(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA needs matrices with equal row counts, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    return H @ (X @ X.T) @ H, H @ (Y @ Y.T) @ H


def cka(X, Y, variant: str = "frobenius") -> float:
    """Linear centered kernel alignment between two row-aligned matrices.

    ``variant="frobenius"`` uses ``||Kc Lc||_F^2 / (||Kc Kc||_F ||Lc Lc||_F)``;
    ``variant="trace"`` the usual ``tr(Kc Lc) / sqrt(tr(Kc Kc) tr(Lc Lc))``.
    Both are 0 when a denominator vanishes.
    """
    Kc, Lc = _centered_grams(X, Y)
    if variant == "frobenius":
        num = np.linalg.norm(Kc @ Lc) ** 2
        den = np.linalg.norm(Kc @ Kc) * np.linalg.norm(Lc @ Lc)
    elif variant == "trace":
        num = np.sum(Kc * Lc)
        den = np.sqrt(np.sum(Kc * Kc) * np.sum(Lc * Lc))
    else:
        raise ValueError(f"unknown CKA variant {variant!r}")
    if not den > 0:
        return 0.0
    return float(min(max(num / den, 0.0), 1.0))


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterVerdict:
    benign: tuple[int, ...]
    poisoned: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.benign) + len(self.poisoned)

    def mask(self) -> np.ndarray:
        """Boolean vector, True for poisoned clients."""
        m = np.zeros(self.n, dtype=bool)
        m[list(self.poisoned)] = True
        return m


class TwoMeans1D(ClusterMixin, BaseEstimator):
    """Exact 2-means on a line.

    Sorted values are split at the boundary with the smallest within-cluster
    sum of squares (a prefix-sum scan over all n-1 cut points), which is the
    fixed point Lloyd's iterations seek but without their local optima.
    Label 1 is the cluster holding the largest value.

    ``min_gap`` and ``min_separation`` reject weak splits: unless the gap
    between the two centers is at least ``min_gap`` and at least
    ``min_separation`` pooled within-cluster standard deviations, every value
    is put in one cluster (``significant_`` is then False). Both default to 0,
    which keeps the pure minimum-SSE split.
    """

    def __init__(self, spread_eps=SPREAD_EPS, min_gap=0.0, min_separation=0.0):
        self.spread_eps = spread_eps
        self.min_gap = min_gap
        self.min_separation = min_separation

    def _single(self, x):
        self.cluster_centers_ = np.array([x.mean(), x.mean()])
        self.threshold_ = -np.inf
        self.labels_ = np.ones(x.size, dtype=np.int64)
        self.inertia_ = float(np.sum((x - x.mean()) ** 2))
        self.significant_ = False
        return self

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64).ravel()
        if x.size < 2:
            raise ValueError("need at least 2 values to cluster")
        if not np.all(np.isfinite(x)):
            raise ValueError("values must be finite")
        if x.max() - x.min() < self.spread_eps:
            return self._single(x)
        order = np.argsort(x, kind="stable")
        s = x[order]
        n = s.size
        c1 = np.cumsum(s)
        c2 = np.cumsum(s * s)
        left = np.arange(1, n)
        sse_l = c2[:-1] - c1[:-1] ** 2 / left
        right = n - left
        sse_r = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / right
        cut = int(np.argmin(sse_l + sse_r)) + 1
        lo, hi = s[:cut].mean(), s[cut:].mean()
        inertia = float(np.sum((s[:cut] - lo) ** 2) + np.sum((s[cut:] - hi) ** 2))
        pooled_sd = np.sqrt(inertia / (n - 2)) if n > 2 else 0.0
        if hi - lo < self.min_gap or hi - lo < self.min_separation * pooled_sd:
            return self._single(x)
        self.cluster_centers_ = np.array([lo, hi])
        self.threshold_ = 0.5 * (s[cut - 1] + s[cut])
        labels = np.empty(n, dtype=np.int64)
        labels[order[:cut]] = 0
        labels[order[cut:]] = 1
        self.labels_ = labels
        self.inertia_ = inertia
        self.significant_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        x = np.asarray(X, dtype=np.float64).ravel()
        return (x > self.threshold_).astype(np.int64)


def verdict_from_labels(labels, scores) -> FilterVerdict:
    """Majority cluster is benign; on equal sizes the higher-mean cluster wins."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    groups = [np.flatnonzero(labels == c) for c in (0, 1)]
    if len(groups[0]) == 0 or len(groups[1]) == 0:
        return FilterVerdict(tuple(range(len(labels))), ())
    if len(groups[0]) != len(groups[1]):
        benign_c = int(len(groups[1]) > len(groups[0]))
    else:
        benign_c = int(scores[groups[1]].mean() >= scores[groups[0]].mean())
    benign = groups[benign_c]
    poisoned = groups[1 - benign_c]
    return FilterVerdict(tuple(int(i) for i in benign), tuple(int(i) for i in poisoned))


def cluster_scores(scores, min_gap: float = 0.0, min_separation: float = 0.0) -> FilterVerdict:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 2:
        raise ValueError("need at least 2 clients to cluster")
    km = TwoMeans1D(min_gap=min_gap, min_separation=min_separation).fit(scores)
    return verdict_from_labels(km.labels_, scores)


# --------------------------------------------------------------------------
# aggregation and the full pipeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DefenseResult:
    aggregate: ModelWeights
    max_index: int
    scores: np.ndarray
    verdict: FilterVerdict
    autoencoder: AutoEncoder | None = None


def score_updates(global_w, updates, autoencoder=None, variant="frobenius") -> np.ndarray:
    g_lsr = normalize_rows(encode_lsr(autoencoder, extract_plr(global_w)))
    return np.array([
        cka(normalize_rows(encode_lsr(autoencoder, extract_plr(u))), g_lsr, variant)
        for u in updates
    ])


def run_pentidef(global_w: ModelWeights, updates, ae_cfg: AEConfig | None = None,
                 seed: int = 0, variant: str = "frobenius", use_autoencoder: bool = True,
                 min_gap: float = DEFAULT_MIN_GAP,
                 min_separation: float = DEFAULT_MIN_SEPARATION) -> DefenseResult:
    """Filter one round of local updates and average the benign ones.

    With ``use_autoencoder=False`` the CKA is taken on the raw PLRs, which is
    the FedCC baseline. Pass ``min_gap=min_separation=0`` to always act on
    the 2-means split.
    """
    models = [_weights_of(u) for u in updates]
    if len(models) < 2:
        raise ValueError("need at least 2 updates")
    check_same_spec(models, reference=global_w)
    ae = None
    if use_autoencoder:
        pool = [extract_plr(global_w)] + [extract_plr(m) for m in models]
        ae = train_autoencoder(pool, ae_cfg, seed)
    scores = score_updates(global_w, models, ae, variant)
    verdict = cluster_scores(scores, min_gap, min_separation)
    aggregate = fed_avg([models[i] for i in verdict.benign])
    return DefenseResult(aggregate, int(np.argmax(scores)), scores, verdict, ae)


class PenTiDef(BaseEstimator):
    """Estimator front-end for the latent-space filter.

    ``fit(updates, global_weights)`` trains the autoencoder on the pooled
    PLRs, scores every update and clusters the scores. ``predict`` labels
    updates 1 (poisoned) or 0 (benign) using the fitted autoencoder and the
    fitted 2-means boundary.
    """

    def __init__(self, bottleneck=None, ae_hidden=None, ae_epochs=50, ae_learning_rate=1e-2,
                 ae_batch_size=32, code_activation=DEFAULT_CODE_ACTIVATION, cka_variant="frobenius",
                 use_autoencoder=True, min_gap=DEFAULT_MIN_GAP,
                 min_separation=DEFAULT_MIN_SEPARATION, random_state=0):
        self.bottleneck = bottleneck
        self.ae_hidden = ae_hidden
        self.ae_epochs = ae_epochs
        self.ae_learning_rate = ae_learning_rate
        self.ae_batch_size = ae_batch_size
        self.code_activation = code_activation
        self.cka_variant = cka_variant
        self.use_autoencoder = use_autoencoder
        self.min_gap = min_gap
        self.min_separation = min_separation
        self.random_state = random_state

    def _ae_config(self):
        return AEConfig(self.bottleneck, self.ae_hidden, self.ae_epochs,
                        self.ae_learning_rate, self.ae_batch_size, self.code_activation)

    def fit(self, updates, global_weights):
        res = run_pentidef(global_weights, updates, self._ae_config(), self.random_state,
                           self.cka_variant, self.use_autoencoder, self.min_gap,
                           self.min_separation)
        self.global_weights_ = global_weights
        self.autoencoder_ = res.autoencoder
        self.scores_ = res.scores
        self.verdict_ = res.verdict
        self.labels_ = res.verdict.mask().astype(np.int64)
        self.max_index_ = res.max_index
        self.aggregate_ = res.aggregate
        self._km = TwoMeans1D(min_gap=self.min_gap, min_separation=self.min_separation).fit(res.scores)
        self._benign_high = bool(
            not res.verdict.poisoned
            or res.scores[list(res.verdict.benign)].mean() >= res.scores[list(res.verdict.poisoned)].mean()
        )
        return self

    def score_samples(self, updates):
        check_is_fitted(self, "scores_")
        return score_updates(self.global_weights_, [_weights_of(u) for u in updates],
                             self.autoencoder_, self.cka_variant)

    def predict(self, updates):
        s = self.score_samples(updates)
        if not self.verdict_.poisoned:
            return np.zeros(len(s), dtype=np.int64)
        high = self._km.predict(s).astype(bool)
        return (~high if self._benign_high else high).astype(np.int64)

    def fit_predict(self, updates, global_weights):
        return self.fit(updates, global_weights).labels_
