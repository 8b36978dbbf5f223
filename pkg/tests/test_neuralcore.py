import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from conftest import toy_separable
from pentidef.datahub import Dataset
from pentidef.neuralcore import (LayerSpec, MetricsReport, ModelWeights, SpecError, TrainConfig,
                                 deserialize_weights, evaluate, forward, gradient_check,
                                 init_network, predict_proba, serialize_weights, train_local)
from pentidef.oracles import confusion_metrics


def test_init_shapes_and_finite():
    w = init_network(LayerSpec((4, 8, 6, 1)), 42)
    assert [W.shape for W, _ in w.layers] == [(8, 4), (6, 8), (1, 6)]
    assert [b.shape for _, b in w.layers] == [(8,), (6,), (1,)]
    assert w.is_finite()


def test_init_accepts_wide_input():
    w = init_network(LayerSpec((71, 16, 8, 1)), 0)
    assert w.layers[0][0].shape == (16, 71)


def test_init_is_deterministic():
    a = init_network(LayerSpec((4, 8, 6, 1)), 7)
    b = init_network(LayerSpec((4, 8, 6, 1)), 7)
    assert serialize_weights(a) == serialize_weights(b)


@pytest.mark.parametrize("sizes", [(4, 1), (4, 3, 1), (4, 0, 3, 1)])
def test_shallow_or_empty_spec_rejected(sizes):
    with pytest.raises(SpecError):
        LayerSpec(sizes)


def test_zero_weights_predict_half():
    w = init_network(LayerSpec((3, 5, 4, 1)), 0).map(np.zeros_like)
    p = predict_proba(w, np.random.default_rng(0).normal(size=(10, 3)))
    assert np.all(p == 0.5)


def test_forward_scalar_chain_matches_hand_arithmetic():
    spec = LayerSpec((1, 1, 1, 1))
    layers = ((np.array([[1.0]]), np.array([0.0])),
              (np.array([[-0.5]]), np.array([3.0])),
              (np.array([[0.7]]), np.array([-0.2])))
    w = ModelWeights(spec, layers)
    h1 = max(1.0 * 2.0, 0.0)
    h2 = max(-0.5 * h1 + 3.0, 0.0)
    expected = 1.0 / (1.0 + math.exp(-(0.7 * h2 - 0.2)))
    _, out = forward(w, np.array([[2.0]]))
    assert out[0, 0] == pytest.approx(expected, abs=1e-15)


def test_forward_rejects_wrong_width():
    w = init_network(LayerSpec((3, 4, 4, 1)), 0)
    with pytest.raises(ValueError):
        forward(w, np.zeros((2, 5)))


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_predictions_in_unit_interval(n, seed):
    w = init_network(LayerSpec((3, 5, 4, 1)), seed)
    X = np.random.default_rng(seed).normal(0, 10, (n, 3))
    p = predict_proba(w, X)
    assert p.shape == (n,)
    assert np.all((p >= 0) & (p <= 1))


def test_zero_learning_rate_is_identity():
    data = toy_separable()
    w = init_network(LayerSpec((2, 4, 4, 1)), 0)
    out = train_local(w, data, TrainConfig(learning_rate=0.0, epochs=3))
    assert serialize_weights(out) == serialize_weights(w)


def test_training_leaves_input_untouched():
    data = toy_separable()
    w = init_network(LayerSpec((2, 4, 4, 1)), 0)
    before = serialize_weights(w)
    train_local(w, data, TrainConfig(epochs=2, batch_size=16))
    assert serialize_weights(w) == before


def test_separable_toy_reaches_full_accuracy():
    data = toy_separable(200)
    # oracle: a linear model separates this set perfectly
    assert LogisticRegression().fit(data.features, data.labels).score(data.features, data.labels) == 1.0
    w = train_local(init_network(LayerSpec((2, 8, 8, 1)), 0), data,
                    TrainConfig(learning_rate=0.01, epochs=50, batch_size=16))
    assert evaluate(w, data).accuracy == 1.0


def test_large_batch_and_epoch_defaults_accepted():
    cfg = TrainConfig(batch_size=1024, epochs=5)
    w = train_local(init_network(LayerSpec((2, 4, 4, 1)), 0), toy_separable(), cfg)
    assert w.is_finite()


def test_training_is_deterministic():
    data = toy_separable()
    cfg = TrainConfig(epochs=3, batch_size=32, seed=9)
    w = init_network(LayerSpec((2, 6, 4, 1)), 1)
    assert serialize_weights(train_local(w, data, cfg)) == serialize_weights(train_local(w, data, cfg))


def test_full_batch_sgd_loss_non_increasing():
    data = toy_separable(100)
    hist = []
    train_local(init_network(LayerSpec((2, 4, 4, 1)), 3), data,
                TrainConfig(learning_rate=0.05, epochs=40, batch_size=100, optimizer="sgd"),
                loss_history=hist)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_train_rejects_bad_inputs():
    w = init_network(LayerSpec((2, 4, 4, 1)), 0)
    with pytest.raises(ValueError):
        train_local(w, Dataset(np.zeros((0, 2)), np.zeros(0)), TrainConfig())
    with pytest.raises(ValueError):
        train_local(w, Dataset(np.zeros((3, 2)), np.array([0, 1, 1])).with_labels(np.array([0, 2, 1])),
                    TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(epochs=-1), dict(batch_size=0),
                                    dict(optimizer="rmsprop")])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_metrics_from_counts():
    m = MetricsReport(tp=3, tn=4, fp=1, fn=2)
    oracle = confusion_metrics(3, 4, 1, 2)
    assert m.accuracy == pytest.approx(0.7)
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-4)
    for k, v in oracle.items():
        assert getattr(m, k) == pytest.approx(v, abs=1e-12)


def test_metrics_zero_division_defined_as_zero():
    m = MetricsReport(tp=0, tn=5, fp=0, fn=0)
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)


def test_metrics_perfect_and_all_positive():
    y = np.array([0, 1, 0, 1])
    assert MetricsReport.from_predictions(y, y).f1 == 1.0
    m = MetricsReport.from_predictions(y, np.ones(4))
    assert (m.accuracy, m.recall, m.precision) == (0.5, 1.0, 0.5)


def test_evaluate_counts_sum_to_size():
    data = toy_separable(60)
    m = evaluate(init_network(LayerSpec((2, 3, 3, 1)), 0), data)
    assert m.tp + m.tn + m.fp + m.fn == 60
    assert min(m.tp, m.tn, m.fp, m.fn) >= 0
    with pytest.raises(ValueError):
        evaluate(init_network(LayerSpec((2, 3, 3, 1)), 0), data, threshold=1.0)


def test_gradient_check_small_net():
    r = np.random.default_rng(0)
    w = init_network(LayerSpec((3, 5, 4, 1)), 0)
    batch = Dataset(r.normal(size=(4, 3)), r.integers(0, 2, 4))
    err = gradient_check(w, batch, h=1e-5)
    assert err < 1e-4
    assert gradient_check(w, batch, h=1e-5) == err


def test_gradient_check_zero_gradient_point():
    # all-zero hidden weights: relu outputs vanish and only the output bias matters
    w = init_network(LayerSpec((2, 3, 3, 1)), 0).map(np.zeros_like)
    batch = Dataset(np.ones((4, 2)), np.array([0, 1, 0, 1]))
    # balanced labels with p = 0.5 everywhere gives a zero gradient
    assert gradient_check(w, batch, h=1e-5) < 1e-4


def test_gradient_check_rejects_bad_step():
    w = init_network(LayerSpec((2, 3, 3, 1)), 0)
    with pytest.raises(ValueError):
        gradient_check(w, toy_separable(4), h=1e-2)


def test_serialization_round_trip():
    w = init_network(LayerSpec((5, 7, 3, 1)), 11)
    blob = serialize_weights(w)
    back = deserialize_weights(blob)
    assert back.spec == w.spec
    assert serialize_weights(back) == blob
    with pytest.raises(ValueError):
        deserialize_weights(b"XXXX" + blob[4:])


def test_mlp_classifier_estimator_protocol():
    from sklearn.base import clone
    from pentidef.neuralcore import MLPClassifier

    r = np.random.default_rng(1)
    X = r.normal(size=(400, 5))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    m = MLPClassifier(epochs=20, random_state=3).fit(X, y)
    assert (m.predict(X) == y).mean() > 0.95
    assert np.allclose(m.predict_proba(X).sum(axis=1), 1.0)
    twin = clone(m).fit(X, y)
    assert twin.weights_.to_bytes() == m.weights_.to_bytes()
    assert clone(m).get_params() == m.get_params()
