import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moeptq import _fallback
from moeptq import tensor_core as tc

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for p in range(a.shape[1]):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_examples():
    np.testing.assert_array_equal(tc.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])
    np.testing.assert_array_equal(tc.matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_matches_naive_loop_exactly(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert np.array_equal(tc.matmul(a, b), naive_matmul(a, b))


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(tc.softmax_rows([[0.7, 0.7 + math.log(2)]]), [[1 / 3, 2 / 3]], atol=1e-12)
    big = tc.softmax_rows([[1000.0, 1001.0]])
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, tc.softmax_rows([[0.0, 1.0]]), atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        tc.softmax_rows([[0.0, np.inf]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_properties(v, c):
    p = tc.softmax_rows(v)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(tc.softmax_rows(v + c), p, atol=1e-9)


def test_log_softmax_agrees_with_softmax(rng):
    v = rng.standard_normal((4, 9)) * 5
    np.testing.assert_allclose(np.exp(tc.log_softmax_rows(v)), tc.softmax_rows(v), atol=1e-12)


def test_rmsnorm_examples(rng):
    np.testing.assert_allclose(tc.rmsnorm([[2.0, 2, 2, 2]], np.ones(4), eps=0.0), [[1.0, 1, 1, 1]])
    x = rng.standard_normal((3, 6))
    g = rng.uniform(0.5, 2, 6)
    np.testing.assert_array_equal(tc.rmsnorm(x, 2 * g), 2 * tc.rmsnorm(x, g))
    row = x[0]
    oracle = row * g / math.sqrt(sum(v * v for v in row) / len(row) + 1e-6)
    np.testing.assert_allclose(tc.rmsnorm(x, g)[0], oracle, rtol=1e-12)


def test_rmsnorm_gain_length():
    with pytest.raises(ValueError):
        tc.rmsnorm(np.ones((2, 3)), np.ones(4))


def test_topk_examples():
    assert tc.topk([5, 1, 5, 0], 2).indices == (0, 2)
    sel = tc.topk([0.1, 3.0, -1.0, 2.0], 4)
    assert sel.indices == (1, 3, 0, 2)
    assert sel.values == (3.0, 2.0, 0.1, -1.0)
    for k in (0, 5):
        with pytest.raises(ValueError):
            tc.topk([1.0, 2.0, 3.0, 4.0], k)


def sort_oracle(v, k):
    return sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_topk_matches_sort_oracle_with_ties(values, data):
    k = data.draw(st.integers(1, len(values)))
    v = [float(x) for x in values]
    assert list(tc.topk(v, k).indices) == sort_oracle(v, k)
    assert tc.topk(v, k) == tc.topk(list(v), k)


def test_topk_random_vector(rng):
    v = rng.standard_normal(10)
    assert list(tc.topk(v, 3).indices) == sort_oracle(list(v), 3)


def test_kl_examples():
    assert tc.kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert tc.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        tc.kl_divergence([0.5, 0.5], [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        tc.kl_divergence([0.5, 0.6], [0.5, 0.5])


def test_kl_summation_oracle(rng):
    p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    oracle = sum(pi * math.log(pi / max(qi, 1e-12)) for pi, qi in zip(p, q) if pi > 0)
    assert tc.kl_divergence(p, q) == pytest.approx(oracle, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(0, 1)), arrays(np.float64, 5, elements=st.floats(0, 1)))
def test_kl_nonnegative(a, b):
    if a.sum() == 0 or b.sum() == 0:
        return
    assert tc.kl_divergence(a / a.sum(), b / b.sum()) >= 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(1e-6, 1e3)))
def test_diagonal_scaling_associativity(s):
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))
    lhs = tc.matmul(x / s, s[:, None] * w)
    ref = tc.matmul(x, w)
    np.testing.assert_allclose(lhs, ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())


def test_quantize_grid_clips_and_rounds_half_away():
    q = tc.quantize_grid([[0.5, -0.5, 1.5, -2.5, 100.0, -100.0]], 1.0, 0.0, -8, 7)
    np.testing.assert_array_equal(q, [[1, -1, 2, -3, 7, -8]])
    assert q.dtype == np.int8


def test_fake_quant_rows_per_token(rng):
    x = rng.standard_normal((5, 8))
    vals, scales, zeros = tc.fake_quant_rows(x, 4)
    assert vals.shape == x.shape and scales.shape == (5,)
    assert np.all(np.abs(vals - x) <= scales[:, None] / 2 + 1e-12)


def test_count_ops():
    with tc.count_ops() as ops:
        tc.matmul(np.ones((2, 2)), np.ones((2, 2)))
        tc.softmax_rows(np.ones((1, 2)))
    assert ops["matmul"] == 1 and ops["softmax"] == 1


@pytest.mark.skipif(tc.BACKEND != "cython", reason="compiled extension not built")
def test_backends_bit_identical(rng):
    from moeptq import _kernels

    a, b = rng.standard_normal((9, 13)), rng.standard_normal((13, 6))
    assert np.array_equal(_kernels.matmul(a, b), _fallback.matmul(a, b))

    t = rng.standard_normal((7, 5)) * 4
    t[0, :3] = [0.5, -1.5, 2.5]
    t[1] = [1e300, -1e300, np.inf, -np.inf, 3e9]  # far off the grid; must clip the same way
    scale = np.full(t.shape, 0.5)
    zero = np.full(t.shape, 1.0)
    assert np.array_equal(_kernels.quantize(t, scale, zero, -8.0, 7.0), _fallback.quantize(t, scale, zero, -8.0, 7.0))

    x = rng.standard_normal((6, 11)) * 3
    x[2] = 0.0
    x[3] = 1e-12  # constant row at the scale floor
    x[4, 0] = 1e12
    for symmetric in (False, True):
        got = _kernels.fake_quant_rows(x, -8.0, 7.0, symmetric, 1e-8)
        ref = _fallback.fake_quant_rows(x, -8.0, 7.0, symmetric, 1e-8)
        for g, r in zip(got, ref):
            assert np.array_equal(np.asarray(g), np.asarray(r))

    v = rng.integers(-2, 3, (8, 10)).astype(np.float64)
    assert np.array_equal(_kernels.topk_rows(v, 4), _fallback.topk_rows(v, 4))
