from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moeptq.quantizer import (QuantParams, QuantSpec, candidate_grid, dequantize, fake_quantize, minmax_params,
                              quantize, search_params)


def scalar_quantize(t, scale, zero, qmin, qmax):
    r = int(Decimal(t / scale).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(max(r + zero, qmin), qmax)


@pytest.mark.parametrize("bits", [3, 4, 8])
@pytest.mark.parametrize("symmetric", [False, True])
def test_grid_bounds(bits, symmetric):
    spec = QuantSpec(bits, symmetric)
    assert spec.q_max - spec.q_min == 2**bits - 1


def test_spec_validation():
    with pytest.raises(ValueError):
        QuantSpec(5)
    with pytest.raises(ValueError):
        QuantSpec(4, granularity="per-block")


@pytest.mark.parametrize("granularity", ["per-channel", "per-token", "per-tensor"])
def test_quantize_matches_scalar_oracle(rng, granularity):
    spec = QuantSpec(4, False, granularity)
    t = rng.standard_normal((6, 5)) * 3
    params = minmax_params(t, spec)
    q = quantize(t, params, spec)
    for i in range(6):
        for j in range(5):
            g = {"per-channel": j, "per-token": i, "per-tensor": 0}[granularity]
            assert q[i, j] == scalar_quantize(t[i, j], params.scale[g], params.zero[g], spec.q_min, spec.q_max)
            assert dequantize(q, params, spec)[i, j] == (int(q[i, j]) - params.zero[g]) * params.scale[g]


def test_ties_round_away_from_zero():
    spec = QuantSpec(4, True, "per-tensor")
    q = quantize([[0.5, -0.5, 2.5, -2.5]], QuantParams([1.0], [0]), spec)
    np.testing.assert_array_equal(q, [[1, -1, 3, -3]])


def test_zeros_and_grid_fixed_points():
    spec = QuantSpec(4)
    params = QuantParams([0.25, 0.5], [0, 0])
    assert np.all(quantize(np.zeros((3, 2)), params, spec) == 0)
    on_grid = np.array([[-2.0, -4.0], [0.25, 3.5], [1.75, -0.5]])
    assert np.array_equal(fake_quantize(on_grid, params, spec), on_grid)


def test_rejects_bad_params():
    spec = QuantSpec(4)
    with pytest.raises(ValueError, match="positive"):
        quantize(np.ones((2, 2)), QuantParams([1.0, 0.0], [0, 0]), spec)
    with pytest.raises(ValueError, match="groups"):
        quantize(np.ones((2, 2)), QuantParams([1.0], [0]), spec)
    with pytest.raises(ValueError, match="zero-point"):
        quantize(np.ones((2, 2)), QuantParams([1.0, 1.0], [0, 9]), spec)
    with pytest.raises(ValueError, match="group count"):
        dequantize(np.ones((2, 2), dtype=np.int8), QuantParams([1.0], [0]), spec)


def test_minmax_examples():
    spec = QuantSpec(4, granularity="per-tensor")
    p = minmax_params(np.arange(16, dtype=float).reshape(4, 4), spec)
    assert p.scale[0] == 1.0 and p.zero[0] == spec.q_min
    z = minmax_params(np.zeros((3, 2)), QuantSpec(4))
    assert np.all(z.scale == 1e-8) and np.all(z.zero == 0)
    assert np.all(fake_quantize(np.zeros((3, 2)), z, QuantSpec(4)) == 0)


@pytest.mark.parametrize("bits", [3, 4, 8])
@pytest.mark.parametrize("symmetric", [False, True])
def test_minmax_never_clips_and_bounds_error(rng, bits, symmetric):
    spec = QuantSpec(bits, symmetric)
    t = rng.standard_normal((40, 7)) * rng.uniform(0.1, 10, 7) + rng.uniform(-2, 2, 7)
    params = minmax_params(t, spec)
    q = quantize(t, params, spec)
    raw = np.vectorize(lambda v, s, z: scalar_quantize(v, s, z, -10**9, 10**9))(t, params.scale, params.zero)
    assert np.array_equal(q, raw), "a value was clipped"
    assert np.all(np.abs(fake_quantize(t, params, spec) - t) <= params.scale / 2 * (1 + 1e-12))


def test_eight_bit_relative_error(rng):
    spec = QuantSpec(8)
    t = rng.standard_normal((64, 32))
    err = fake_quantize(t, minmax_params(t, spec), spec) - t
    assert np.linalg.norm(err) / np.linalg.norm(t) < 0.01


def test_constant_symmetric_exact():
    spec = QuantSpec(4, True, "per-tensor")
    t = np.full((3, 3), 1.75)
    assert np.array_equal(fake_quantize(t, minmax_params(t, spec), spec), t)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)), st.sampled_from([3, 4, 8]), st.booleans())
def test_codes_always_in_range(t, bits, symmetric):
    spec = QuantSpec(bits, symmetric)
    params = minmax_params(t, spec)
    params.scale *= 0.3  # force clipping
    q = quantize(t, params, spec)
    assert q.min() >= spec.q_min and q.max() <= spec.q_max


def mse_per_channel(t, spec):
    return lambda p: np.mean((fake_quantize(t, p, spec) - t) ** 2, axis=0)


def test_search_prefers_clipping_an_outlier(rng):
    spec = QuantSpec(4, True)
    t = rng.standard_normal((256, 1))
    t[0, 0] = 40.0
    base = minmax_params(t, spec)
    best = search_params(t, spec, mse_per_channel(t, spec))
    assert best.scale[0] < base.scale[0]
    # exhaustive oracle over the same grid
    cands = candidate_grid(spec)
    vals = [mse_per_channel(t, spec)(QuantParams(base.scale * m, base.zero))[0] for m, _ in cands]
    assert best.scale[0] == base.scale[0] * cands[int(np.argmin(vals))][0]


def test_search_ties_pick_first_candidate(rng):
    spec = QuantSpec(4)
    t = rng.standard_normal((8, 3))
    base = minmax_params(t, spec)
    first_m, first_o = candidate_grid(spec)[0]
    best = search_params(t, spec, lambda p: 0.0)
    np.testing.assert_array_equal(best.scale, base.scale * first_m)
    np.testing.assert_array_equal(best.zero, np.clip(base.zero + first_o, spec.q_min, spec.q_max))
    vec = search_params(t, spec, lambda p: np.zeros(3))
    np.testing.assert_array_equal(vec.scale, best.scale)


def test_singleton_grid_returns_minmax(rng):
    spec = QuantSpec(3)
    t = rng.standard_normal((8, 4))
    best = search_params(t, spec, mse_per_channel(t, spec), grid=[1.0])
    base = minmax_params(t, spec)
    assert np.array_equal(best.scale, base.scale) and np.array_equal(best.zero, base.zero)
    with pytest.raises(ValueError, match="empty"):
        search_params(t, spec, mse_per_channel(t, spec), grid=[])


def test_default_grid_shape():
    asym, sym = candidate_grid(QuantSpec(4)), candidate_grid(QuantSpec(4, True))
    mults = sorted({m for m, _ in sym})
    assert len(mults) == 65 and 1.0 in mults and mults[0] == 0.4 and mults[-1] == 1.2
    assert len(asym) == 3 * len(sym)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([3, 4, 8]), st.booleans(), st.booleans())
def test_search_never_worse_than_minmax(seed, bits, symmetric, scalar):
    rng = np.random.default_rng(seed)
    spec = QuantSpec(bits, symmetric)
    t = rng.standard_normal((20, 4)) * rng.uniform(0.1, 3, 4)
    per = mse_per_channel(t, spec)
    obj = (lambda p: float(per(p).sum())) if scalar else per
    grid = [0.5, 0.9, 1.0, 1.1] if scalar else None
    best = search_params(t, spec, obj, grid)
    assert per(best).sum() <= per(minmax_params(t, spec)).sum()
    assert np.all(best.scale > 0)
