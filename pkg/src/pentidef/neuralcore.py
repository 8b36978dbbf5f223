"""Feed-forward networks with hand-written backpropagation.

The same primitives back the local intrusion-detection classifier (ReLU hidden
layers, sigmoid output, binary cross-entropy) and the autoencoder used by the
defense (identity output, squared error).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_matrix

PROB_CLIP = 1e-7
_MAGIC = b"PTDW"
_ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Layer widths ``[input, hidden..., output]`` plus activation choices.

    Hidden layers always use ReLU. At least two hidden layers are required so
    that a penultimate layer exists distinct from the input and output.
    """

    sizes: tuple[int, ...]
    output_activation: str = "sigmoid"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 4:
            raise SpecError(
                f"need at least 2 hidden layers, got sizes {list(sizes)}"
            )
        if any(s < 1 for s in sizes):
            raise SpecError(f"all widths must be >= 1, got {list(sizes)}")
        if self.output_activation not in _ACTIVATIONS:
            raise SpecError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [((o, i), (o,)) for i, o in zip(self.sizes[:-1], self.sizes[1:])]


@dataclass(frozen=True)
class ModelWeights:
    """Ordered ``(weight out x in, bias out)`` pairs for every layer."""

    spec: LayerSpec
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        layers = tuple(
            (np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for W, b in self.layers
        )
        object.__setattr__(self, "layers", layers)
        expected = self.spec.shapes()
        if len(layers) != len(expected):
            raise SpecError(
                f"expected {len(expected)} layers, got {len(layers)}"
            )
        for k, ((W, b), (ws, bs)) in enumerate(zip(layers, expected)):
            if W.shape != ws or b.shape != bs:
                raise SpecError(
                    f"layer {k}: shapes {W.shape}/{b.shape} do not match {ws}/{bs}"
                )

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iter(self.layers)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    @classmethod
    def from_flat(cls, spec: LayerSpec, vec) -> "ModelWeights":
        vec = np.asarray(vec, dtype=np.float64)
        layers, pos = [], 0
        for (ws, bs) in spec.shapes():
            n_w = ws[0] * ws[1]
            W = vec[pos:pos + n_w].reshape(ws)
            pos += n_w
            b = vec[pos:pos + bs[0]]
            pos += bs[0]
            layers.append((W.copy(), b.copy()))
        if pos != vec.size:
            raise SpecError(f"flat vector has {vec.size} values, spec needs {pos}")
        return cls(spec, tuple(layers))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, tuple((W.copy(), b.copy()) for W, b in self.layers))

    def map(self, fn) -> "ModelWeights":
        return ModelWeights(self.spec, tuple((fn(W), fn(b)) for W, b in self.layers))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.layers)

    def allclose(self, other: "ModelWeights", atol: float = 0.0) -> bool:
        if self.spec != other.spec:
            return False
        return bool(np.max(np.abs(self.flat() - other.flat()), initial=0.0) <= atol)

    def to_bytes(self) -> bytes:
        return serialize_weights(self)


def serialize_weights(w: ModelWeights) -> bytes:
    """Bit-exact little-endian encoding: header, layer widths, float64 stream."""
    sizes = w.spec.sizes
    act = w.spec.output_activation.encode()
    header = _MAGIC + struct.pack("<B", len(act)) + act
    header += struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
    return header + w.flat().astype("<f8").tobytes()


def deserialize_weights(blob: bytes) -> ModelWeights:
    if blob[:4] != _MAGIC:
        raise ValueError("not a serialized weight blob")
    pos = 4
    (n_act,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    act = blob[pos:pos + n_act].decode()
    pos += n_act
    (n_sizes,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, pos)
    pos += 4 * n_sizes
    spec = LayerSpec(tuple(sizes), act)
    vec = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    return ModelWeights.from_flat(spec, vec)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 5
    batch_size: int = 1024
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float = field(init=False)
    precision: float = field(init=False)
    recall: float = field(init=False)
    f1: float = field(init=False)

    def __post_init__(self):
        total = self.tp + self.tn + self.fp + self.fn
        object.__setattr__(self, "accuracy", _ratio(self.tp + self.tn, total))
        p = _ratio(self.tp, self.tp + self.fp)
        r = _ratio(self.tp, self.tp + self.fn)
        object.__setattr__(self, "precision", p)
        object.__setattr__(self, "recall", r)
        object.__setattr__(self, "f1", _ratio(2 * p * r, p + r))

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "MetricsReport":
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls(
            tp=int(np.sum(y_true & y_pred)),
            tn=int(np.sum(~y_true & ~y_pred)),
            fp=int(np.sum(~y_true & y_pred)),
            fn=int(np.sum(y_true & ~y_pred)),
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("tp", "tn", "fp", "fn", "accuracy", "precision", "recall", "f1")}


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def init_network(spec: LayerSpec, seed: int) -> ModelWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if not isinstance(spec, LayerSpec):
        spec = LayerSpec(tuple(spec))
    rng = np.random.default_rng(seed)
    layers = []
    for (ws, bs) in spec.shapes():
        limit = 1.0 / np.sqrt(ws[1])
        layers.append((rng.uniform(-limit, limit, size=ws), np.zeros(bs)))
    return ModelWeights(spec, tuple(layers))


def _sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def forward(w: ModelWeights, batch) -> tuple[list[np.ndarray], np.ndarray]:
    """Run a batch through the network.

    Returns the list of layer outputs (input first, final output last) and the
    final output. For the classifier the final output is a column of
    probabilities; callers wanting a flat vector use ``predict_proba``.
    """
    X = check_matrix(batch, n_cols=w.spec.input_dim, name="batch")
    acts = [X]
    h = X
    last = w.spec.n_layers - 1
    for k, (W, b) in enumerate(w.layers):
        z = h @ W.T + b
        h = _activate(z, w.spec.output_activation if k == last else "relu")
        acts.append(h)
    return acts, h


def predict_proba(w: ModelWeights, X) -> np.ndarray:
    return forward(w, X)[1][:, 0]


def backward(w: ModelWeights, acts: Sequence[np.ndarray], grad_out: np.ndarray,
             need_input_grad: bool = False):
    """Backpropagate ``grad_out`` (gradient w.r.t. the last pre-activation).

    Returns per-layer ``(dW, db)`` and, optionally, the gradient w.r.t. the input.
    """
    grads = [None] * w.spec.n_layers
    delta = grad_out
    for k in range(w.spec.n_layers - 1, -1, -1):
        W, _ = w.layers[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0 or need_input_grad:
            delta = delta @ W
            if k > 0:
                delta = delta * (acts[k] > 0)
    if need_input_grad:
        return grads, delta
    return grads


def bce_loss_and_grads(w: ModelWeights, X, y):
    """Mean binary cross-entropy on clamped probabilities and its gradient."""
    acts, out = forward(w, X)
    p = out[:, 0]
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    # the clamp has zero derivative outside its range
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    g = np.where(inside, p - y, 0.0) / len(y)
    return loss, backward(w, acts, g[:, None])


class _Optimizer:
    def __init__(self, cfg: TrainConfig, shapes):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros(s) for s in shapes]
            self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
            return
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps_opt)


def _flat_params(w: ModelWeights) -> list[np.ndarray]:
    out = []
    for W, b in w.layers:
        out.extend((W, b))
    return out


def train_local(w: ModelWeights, data, cfg: TrainConfig, loss_history: list | None = None) -> ModelWeights:
    """Mini-batch BCE training; returns new weights, leaves ``w`` untouched.

    Batches are reshuffled every epoch from an RNG seeded by ``cfg.seed``.
    If ``loss_history`` is given, the full-data loss before each epoch and
    after the last one is appended to it.
    """
    X = check_matrix(data.features, n_cols=w.spec.input_dim, name="features")
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    y = check_binary_labels(data.labels, n=X.shape[0])
    out = w.copy()
    if cfg.learning_rate == 0 or cfg.epochs == 0:
        return out
    params = _flat_params(out)
    opt = _Optimizer(cfg, [p.shape for p in params])
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    for _ in range(cfg.epochs):
        if loss_history is not None:
            loss_history.append(bce_loss_and_grads(out, X, y)[0])
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = bce_loss_and_grads(out, X[idx], y[idx])
            opt.step(params, [g for pair in grads for g in pair])
    if loss_history is not None:
        loss_history.append(bce_loss_and_grads(out, X, y)[0])
    return out


def evaluate(w: ModelWeights, data, threshold: float = 0.5) -> MetricsReport:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    X = check_matrix(data.features, n_cols=w.spec.input_dim, name="features")
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = check_binary_labels(data.labels, n=X.shape[0])
    return MetricsReport.from_predictions(y, predict_proba(w, X) >= threshold)


def gradient_check(w: ModelWeights, batch, h: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    X = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.float64)
    _, grads = bce_loss_and_grads(w, X, y)
    analytic = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])
    base = w.flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        lp = bce_loss_and_grads(ModelWeights.from_flat(w.spec, plus), X, y)[0]
        lm = bce_loss_and_grads(ModelWeights.from_flat(w.spec, minus), X, y)[0]
        numeric[i] = (lp - lm) / (2.0 * h)
    return relative_error(analytic, numeric)


def relative_error(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    den = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / den, initial=0.0))


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around ``init_network`` + ``train_local``.

    ``hidden`` must name at least two layers. Labels must be 0/1.
    """

    def __init__(self, hidden=(32, 16), learning_rate=0.1, epochs=5, batch_size=64,
                 optimizer="sgd", random_state=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X = check_matrix(X, name="X")
        y = check_binary_labels(y, n=X.shape[0])
        spec = LayerSpec((X.shape[1], *self.hidden, 1))
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.optimizer,
                          seed=self.random_state)
        data = _XY(X, y)
        self.weights_ = train_local(init_network(spec, self.random_state), data, cfg)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        p = predict_proba(self.weights_, check_matrix(X, n_cols=self.n_features_in_, name="X"))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


@dataclass(frozen=True)
class _XY:
    features: np.ndarray
    labels: np.ndarray
