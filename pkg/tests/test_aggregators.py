from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pentidef.aggregators import (coord_median, fed_avg, fedcc, flare_aggregate, knn_trust,
                                  krum, krum_index, mmd)
from pentidef.datahub import Dataset
from pentidef.defense import run_pentidef
from pentidef.neuralcore import LayerSpec, ModelWeights, init_network
from pentidef.oracles import coord_median_sorted, krum_exhaustive, mmd_double_sum

SPEC = LayerSpec((1, 1, 1, 1))


def vw(values):
    flat = np.zeros(6)
    flat[:len(values)] = values
    return ModelWeights.from_flat(SPEC, flat)


def test_fed_avg_examples():
    assert fed_avg([vw([1, 2]), vw([3, 4])]).flat()[:2].tolist() == [2.0, 3.0]
    w = init_network(LayerSpec((3, 4, 2, 1)), 0)
    assert fed_avg([w]).allclose(w)
    assert np.max(np.abs(fed_avg([w] * 7).flat() - w.flat())) <= np.spacing(np.abs(w.flat())).max()
    with pytest.raises(ValueError):
        fed_avg([])


@given(st.lists(st.lists(st.integers(-1000, 1000), min_size=6, max_size=6), min_size=1, max_size=8))
def test_fed_avg_exact_on_rationals(rows):
    # dyadic inputs: the float mean equals the exact rational mean whenever it is representable
    vals = [[Fraction(v, 4) for v in r] for r in rows]
    got = fed_avg([ModelWeights.from_flat(SPEC, np.array([float(v) for v in r])) for r in vals]).flat()
    exact = [sum(col) / len(vals) for col in zip(*vals)]
    assert all(Fraction(g) == e or abs(g - float(e)) <= 1e-12 * max(1, abs(float(e)))
               for g, e in zip(got, exact))


@given(st.permutations(range(5)))
def test_fed_avg_permutation_invariant(perm):
    models = [init_network(LayerSpec((2, 3, 3, 1)), s) for s in range(5)]
    a = fed_avg(models).flat()
    b = fed_avg([models[i] for i in perm]).flat()
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_krum_ties_and_outlier():
    assert krum_index([vw([1, 1])] * 5, 1) == 0
    r = np.random.default_rng(0)
    ups = [vw(r.normal(0, 1e-3, 6)) for _ in range(4)] + [vw(np.full(6, 50.0))]
    idx = krum_index(ups, 1)
    assert idx != 4
    assert idx == krum_exhaustive([u.flat().tolist() for u in ups], 1)[0]
    with pytest.raises(ValueError):
        krum([vw([1])] * 4, 1)


def test_krum_matches_exhaustive_on_small_instances():
    r = np.random.default_rng(5)
    checked = 0
    for n in range(3, 8):
        for f in range(0, 3):
            if n < 2 * f + 3:
                continue
            for _ in range(40):
                # coarse integers make exact ties frequent
                V = r.integers(-3, 4, (n, 6)).astype(float)
                ups = [ModelWeights.from_flat(SPEC, v) for v in V]
                assert krum_index(ups, f) == krum_exhaustive(V.tolist(), f)[0]
                checked += 1
    assert checked > 300


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_krum_translation_invariant(seed):
    r = np.random.default_rng(seed)
    V = r.normal(size=(7, 6))
    shift = r.normal(size=6)
    a = krum_index([ModelWeights.from_flat(SPEC, v) for v in V], 2)
    b = krum_index([ModelWeights.from_flat(SPEC, v + shift) for v in V], 2)
    assert a == b


def test_coord_median_examples():
    assert coord_median([vw([1]), vw([5]), vw([9])]).flat()[0] == 5
    assert coord_median([vw([1]), vw([3])]).flat()[0] == 2
    base = [vw([v]) for v in (1, 2, 3, 4, 5)]
    hit = base[:4] + [vw([1e9])]
    assert coord_median(base).flat()[0] == coord_median(hit).flat()[0] == 3
    with pytest.raises(ValueError):
        coord_median([])


@given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6), min_size=1, max_size=9))
def test_coord_median_matches_sort_oracle_and_bounds(rows):
    V = np.array(rows)
    got = coord_median([ModelWeights.from_flat(SPEC, v) for v in V]).flat()
    assert np.allclose(got, coord_median_sorted(rows), rtol=1e-15, atol=0)
    assert np.all(got >= V.min(axis=0)) and np.all(got <= V.max(axis=0))


def test_mmd_examples():
    r = np.random.default_rng(0)
    X = r.normal(size=(30, 3))
    assert mmd(X, X) == pytest.approx(0.0, abs=1e-9)
    assert mmd(X, X + 6.0) > 0.1
    with pytest.raises(ValueError):
        mmd(np.zeros((0, 3)), X)


def test_mmd_matches_double_sum_oracle():
    r = np.random.default_rng(3)
    for _ in range(50):
        X, Y = r.normal(size=(4, 2)), r.normal(0.5, 1, size=(4, 2))
        bw = float(r.uniform(0.3, 3))
        assert abs(mmd(X, Y, bw) - mmd_double_sum(X.tolist(), Y.tolist(), bw)) < 1e-9


def test_knn_trust_sums_to_one_and_nonnegative():
    r = np.random.default_rng(0)
    A = r.random((6, 6))
    D = A + A.T
    np.fill_diagonal(D, 0)
    t = knn_trust(D, 2)
    assert np.all(t >= 0) and abs(t.sum() - 1) < 1e-12


def test_flare_identical_clients_equals_fedavg():
    w = init_network(LayerSpec((3, 4, 4, 1)), 0)
    probe = np.random.default_rng(0).normal(size=(16, 3))
    res = flare_aggregate([w] * 5, probe)
    assert np.allclose(res.trust, 0.2, atol=1e-12)
    assert res.aggregate.allclose(fed_avg([w] * 5), atol=1e-15)


def test_flare_outlier_gets_minimum_trust():
    r = np.random.default_rng(1)
    base = init_network(LayerSpec((3, 6, 4, 1)), 0)
    ups = [base.map(lambda a: a + r.normal(0, 0.01, a.shape)) for _ in range(4)]
    ups.append(init_network(LayerSpec((3, 6, 4, 1)), 99).map(lambda a: a * 5))
    probe = r.normal(size=(32, 3))
    res = flare_aggregate(ups, probe)
    assert int(np.argmin(res.trust)) == 4
    # the outlier is the client farthest from everyone under the pairwise MMD
    assert int(np.argmax(res.distances.sum(axis=1))) == 4
    assert abs(res.trust.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        flare_aggregate(ups, np.zeros((0, 3)))


def test_fedcc_matches_pentidef_without_autoencoder():
    g = init_network(LayerSpec((3, 6, 5, 1)), 0)
    r = np.random.default_rng(2)
    ups = [g.map(lambda a: a + r.normal(0, 0.01, a.shape)) for _ in range(6)]
    ups += [init_network(LayerSpec((3, 6, 5, 1)), s) for s in (50, 51)]
    agg, scores, verdict = fedcc(g, ups)
    ref = run_pentidef(g, ups, use_autoencoder=False)
    assert verdict == ref.verdict
    assert agg.allclose(ref.aggregate)
    assert np.all((scores >= 0) & (scores <= 1))
