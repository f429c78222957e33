import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from moelab.core import (
    finite_diff_gradient,
    finite_diff_gradient_batched,
    gelu,
    gelu_grad,
    log_softmax,
    pearson,
    regularized_incomplete_beta,
    softmax,
    t_two_sided_p,
    top_k_indices,
)
from moelab.errors import DegenerateSeriesError, DomainError

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_uniform_and_masked():
    assert np.allclose(softmax([0.0, 0.0, 0.0, 0.0]), 0.25)
    p = softmax([1.0, -np.inf, 2.0])
    assert p[1] == 0.0
    assert p.sum() == pytest.approx(1.0)


def test_softmax_large_logits_stable():
    p = softmax([1000.0, 1000.0])
    assert np.allclose(p, 0.5)


@pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [-np.inf, -np.inf]])
def test_softmax_domain(bad):
    with pytest.raises(DomainError):
        softmax(bad)


@given(st.lists(finite, min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    p = softmax(xs)
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p >= 0).all()


@given(st.lists(finite, min_size=1, max_size=12), finite)
def test_softmax_shift_invariant(xs, c):
    assert np.allclose(softmax(xs), softmax(np.array(xs) + c), atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.array([0.3, -1.2, 2.5, 0.0])
    assert np.allclose(log_softmax(x), np.log(softmax(x)), atol=1e-14)


def test_top_k_ties_prefer_lower_index():
    assert top_k_indices([1.0, 3.0, 3.0, 2.0], 2) == [1, 2]
    assert top_k_indices([5.0, 5.0, 5.0], 2) == [0, 1]
    assert top_k_indices([1.0, 2.0], 0) == []
    with pytest.raises(DomainError):
        top_k_indices([1.0], 2)


@given(st.lists(finite, min_size=1, max_size=15), st.data())
def test_top_k_matches_sort_oracle(xs, data):
    k = data.draw(st.integers(0, len(xs)))
    oracle = sorted(range(len(xs)), key=lambda i: (-xs[i], i))[:k]
    assert top_k_indices(xs, k) == oracle


def test_gelu_grad_matches_fd():
    x = np.linspace(-3, 3, 13)
    fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    assert np.allclose(gelu_grad(x), fd, atol=1e-8)
    assert gelu(np.zeros(1))[0] == 0.0


def test_pearson_identities():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert abs(pearson(x, [2 * v + 1 for v in x]).r - 1.0) < 1e-12
    assert abs(pearson(x, [-3 * v for v in x]).r + 1.0) < 1e-12
    assert pearson(x, [2 * v for v in x]).p == 0.0


def test_pearson_hand_case():
    res = pearson([1, 2, 3, 4], [1, 2, 3, 5])
    assert res.r == pytest.approx(0.9827, abs=1e-4)
    assert res.n == 4


def test_pearson_errors():
    with pytest.raises(DomainError):
        pearson([1, 2], [1, 2])
    with pytest.raises(DegenerateSeriesError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DomainError):
        pearson([1, 2, 3], [1, 2])


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31 - 1))
def test_pearson_matches_scipy(n, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=n), r.normal(size=n)
    ours = pearson(x, y)
    ref = stats.pearsonr(x, y)
    assert ours.r == pytest.approx(ref.statistic, abs=1e-12)
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (10.0, 0.5, 0.99), (1.0, 1.0, 0.25),
                                   (30.0, 0.5, 0.5)])
def test_incomplete_beta_matches_scipy(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-12)


def test_t_p_value_matches_scipy():
    for t, df in [(0.0, 5), (2.1, 10), (-3.5, 18), (8.0, 3)]:
        assert t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-10)
    assert t_two_sided_p(math.inf, 4) == 0.0


def test_finite_difference_gradients():
    f = lambda v: float(np.sin(v[0]) * v[1] ** 2)
    x = np.array([0.4, 1.3])
    exact = np.array([np.cos(0.4) * 1.3**2, 2 * np.sin(0.4) * 1.3])
    assert np.allclose(finite_diff_gradient(f, x), exact, atol=1e-7)
    fb = lambda P: np.sin(P[:, 0]) * P[:, 1] ** 2
    assert np.allclose(finite_diff_gradient_batched(fb, x), finite_diff_gradient(f, x), atol=1e-12)
    with pytest.raises(DomainError):
        finite_diff_gradient(f, x, h=0)
