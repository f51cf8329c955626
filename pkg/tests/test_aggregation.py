import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from flsim.aggregation import (
    AggregationRule,
    agg_average,
    agg_median,
    agg_multi_krum,
    agg_norm_bound,
    agg_trimmed_mean,
    aggregate,
    default_krum_c,
    krum_scores,
)
from flsim.errors import ConfigError, InputError


def rand_updates(rng, n, d, spread=True):
    U = rng.standard_normal((n, d)) * (rng.uniform(0.1, 10) if spread else 1)
    if rng.random() < 0.3:
        U[rng.integers(n)] *= 1e3
    return [u for u in U]


def test_average_examples():
    assert np.array_equal(agg_average([np.array([1.0, 1]), np.array([3.0, 3])]).aggregate, [2, 2])
    v = np.array([0.3, -2.0])
    assert np.array_equal(agg_average([v]).aggregate, v)
    out = agg_average([np.zeros(2), np.full(2, 4.0)], weights=[1, 3]).aggregate
    np.testing.assert_allclose(out, [3, 3], atol=1e-15)
    with pytest.raises(InputError):
        agg_average([np.zeros(2), np.zeros(3)])


def test_norm_bound_examples():
    v = np.array([3.0, 4.0])
    assert np.array_equal(agg_norm_bound([v], 10).aggregate, v)
    np.testing.assert_allclose(agg_norm_bound([v], 1).aggregate, [0.6, 0.8], atol=1e-15)


def test_krum_score_examples():
    same = [np.ones(3)] * 5
    assert np.all(krum_scores(same, 1) == 0)
    s = krum_scores([np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([100.0])], 0)
    assert np.argmax(s) == 3 and s[3] > s[:3].max()
    with pytest.raises(ConfigError):
        krum_scores([np.zeros(1)] * 3, 1)


def test_multi_krum_examples():
    same = [np.array([1.5, -2.0])] * 9
    out = agg_multi_krum(same, 2, 2)
    assert np.array_equal(out.aggregate, same[0])
    rng = np.random.default_rng(0)
    ups = [np.array([x]) for x in rng.normal(0, 0.1, 9)] + [np.array([1e6])]
    assert 9 not in agg_multi_krum(ups, 1, 5).selected_indices
    with pytest.raises(ConfigError):
        agg_multi_krum(ups, 2, 5)
    assert default_krum_c(10, 1) == 5


def test_trimmed_mean_and_median_examples():
    ups = [np.array([x]) for x in (1.0, 2.0, 3.0, 100.0)]
    assert agg_trimmed_mean(ups, 1).aggregate[0] == 2.5
    assert agg_median([np.array([x]) for x in (1.0, 2.0, 100.0)]).aggregate[0] == 2
    assert agg_median([np.array([1.0]), np.array([3.0])]).aggregate[0] == 2
    with pytest.raises(ConfigError):
        agg_trimmed_mean(ups, 2)


def test_oracle_equivalence_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 6))
        U = rand_updates(rng, n, d)
        L = [list(map(float, u)) for u in U]
        np.testing.assert_allclose(agg_average(U).aggregate, oracles.mean(L), rtol=0, atol=1e-12 * max(1, np.abs(U).max()))
        tau = float(rng.uniform(0.1, 5))
        np.testing.assert_allclose(agg_norm_bound(U, tau).aggregate, oracles.norm_bound(L, tau), rtol=0, atol=1e-12)
        m = int(rng.integers(0, (n - 1) // 2 + 1))
        np.testing.assert_allclose(agg_trimmed_mean(U, m).aggregate, oracles.trimmed_mean(L, m),
                                   rtol=0, atol=1e-12 * max(1, np.abs(U).max()))
        np.testing.assert_allclose(agg_median(U).aggregate, oracles.median(L), rtol=0, atol=1e-12)
        for mk in range(0, n):
            for c in range(1, n):
                if n - c > 2 * mk + 2:
                    out = agg_multi_krum(U, mk, c)
                    agg, chosen = oracles.multi_krum(L, mk, c)
                    assert out.selected_indices == chosen
                    np.testing.assert_allclose(out.aggregate, agg, rtol=0, atol=1e-12 * max(1, np.abs(U).max()))


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_permutation_invariance(n, d, seed):
    rng = np.random.default_rng(seed)
    U = rand_updates(rng, n, d, spread=False)
    perm = rng.permutation(n)
    P = [U[i] for i in perm]
    for fn in (lambda u: agg_average(u), lambda u: agg_median(u), lambda u: agg_trimmed_mean(u, 1),
               lambda u: agg_norm_bound(u, 1.0)):
        np.testing.assert_allclose(fn(U).aggregate, fn(P).aggregate, atol=1e-9)
    if n >= 5:
        a, b = agg_multi_krum(U, 0, n - 3), agg_multi_krum(P, 0, n - 3)
        assert sorted(perm[i] for i in b.selected_indices) == sorted(a.selected_indices)
        np.testing.assert_allclose(a.aggregate, b.aggregate, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_translation_equivariance(n, d, seed):
    rng = np.random.default_rng(seed)
    U = rand_updates(rng, n, d, spread=False)
    t = rng.standard_normal(d)
    shifted = [u + t for u in U]
    m = (n - 1) // 2
    for fn in (agg_average, agg_median, lambda u: agg_trimmed_mean(u, m)):
        np.testing.assert_allclose(fn(shifted).aggregate, fn(U).aggregate + t, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_trimmed_mean_robust_to_m_outliers(n, d, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(0, (n - 1) // 2 + 1))
    a, b = -1.0, 2.0
    U = [rng.uniform(a, b, d) for _ in range(n - m)] + [rng.standard_normal(d) * 1e9 for _ in range(m)]
    U = [U[i] for i in rng.permutation(n)]
    out = agg_trimmed_mean(U, m).aggregate
    assert np.all(out >= a) and np.all(out <= b)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.floats(0.01, 10), st.integers(0, 2**31 - 1))
def test_norm_bound_postcondition(n, d, tau, seed):
    rng = np.random.default_rng(seed)
    U = rand_updates(rng, n, d)
    out = agg_norm_bound(U, tau)
    for u, s in zip(U, out.per_update_scale):
        clipped = u * s
        assert np.linalg.norm(clipped) <= tau + 1e-12
        if np.linalg.norm(u) <= tau:
            assert s == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 8), st.integers(1, 4), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_multi_krum_scale_invariance_and_size(n, d, lam, seed):
    rng = np.random.default_rng(seed)
    U = rand_updates(rng, n, d, spread=False)
    c = n - 3
    a = agg_multi_krum(U, 0, c)
    b = agg_multi_krum([lam * u for u in U], 0, c)
    assert len(a.selected_indices) == c == len(set(a.selected_indices))
    assert a.selected_indices == b.selected_indices


def test_median_matches_trimmed_mean_odd_n():
    rng = np.random.default_rng(5)
    for n in (1, 3, 5, 7):
        U = rand_updates(rng, n, 3)
        np.testing.assert_allclose(agg_median(U).aggregate, agg_trimmed_mean(U, (n - 1) // 2).aggregate, atol=0)


def test_dispatch():
    U = [np.array([1.0, 0]), np.array([0.0, 3]), np.array([5.0, 5])]
    assert np.array_equal(aggregate(AggregationRule("median"), U).aggregate, agg_median(U).aggregate)
    w = aggregate(AggregationRule("average", weighted=True), U, weights=[1, 1, 2]).aggregate
    np.testing.assert_allclose(w, [2.75, 3.25])
    with pytest.raises(ConfigError):
        AggregationRule("norm_bound", tau=-1)
