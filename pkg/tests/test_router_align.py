import math

import numpy as np
import pytest

from moeptq.quantizer import QuantParams, QuantSpec, fake_quantize, minmax_params
from moeptq.router_align import (DualObjective, RouterCalibConfig, calibrate_router, dual_objective,
                                 holdout_split, kl_expert_subset, kl_subset_size)


@pytest.mark.parametrize("ratio,m", [(0.0, 8), (0.25, 22), (0.5, 36), (0.75, 50), (1.0, 64)])
def test_subset_sizes(ratio, m, rng):
    assert kl_subset_size(64, 8, ratio) == m
    assert kl_expert_subset(rng.standard_normal(64), 8, ratio).size == m


def test_subset_at_zero_ratio_is_topk():
    logits = np.array([0.1, 3.0, -1.0, 2.0, 0.5])
    assert set(kl_expert_subset(logits, 2, 0.0)) == {1, 3}
    assert list(kl_expert_subset(logits, 2, 1.0)) == [1, 3, 4, 0, 2]


def test_config_validation():
    with pytest.raises(ValueError):
        RouterCalibConfig(kl_lambda=-1)
    with pytest.raises(ValueError):
        RouterCalibConfig(kl_ratio=1.5)


def softmax(v):
    e = [math.exp(a - max(v)) for a in v]
    return [a / sum(e) for a in e]


def test_objective_hand_oracle():
    # 3 tokens, d=2, 2 experts, k=1 with r=1 so the KL runs over both experts
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    w = np.array([[0.9, -0.3], [0.2, 0.7]])
    spec = QuantSpec(3, True)
    params = QuantParams([0.25, 0.25], [0, 0])
    wq = fake_quantize(w, params, spec)
    total = 0.0
    for t in range(3):
        lf = [sum(x[t, j] * w[j, i] for j in range(2)) for i in range(2)]
        lq = [sum(x[t, j] * wq[j, i] for j in range(2)) for i in range(2)]
        pf, pq = softmax(lf), softmax(lq)
        mse = sum((a - b) ** 2 for a, b in zip(lf, lq))
        kl = sum(a * math.log(a / b) for a, b in zip(pf, pq))
        total += mse + 0.5 * kl
    cfg = RouterCalibConfig(kl_lambda=0.5, kl_ratio=1.0, k=1)
    assert dual_objective(x, w, params, spec, cfg) == pytest.approx(total / 3, rel=1e-12)


def test_lambda_zero_is_mse_and_exact_is_zero(rng):
    x = rng.standard_normal((30, 6))
    w = rng.standard_normal((6, 4))
    spec = QuantSpec(4)
    p = minmax_params(w, spec)
    mse = np.mean(np.sum((x @ w - x @ fake_quantize(w, p, spec)) ** 2, axis=1))
    assert dual_objective(x, w, p, spec, RouterCalibConfig(kl_lambda=0.0)) == pytest.approx(mse, rel=1e-10)
    grid = np.array([[-4.0, 2.0], [1.0, 0.0]])  # representable at scale 1, symmetric
    assert dual_objective(x[:, :2], grid, QuantParams([1.0, 1.0], [0, 0]), QuantSpec(4, True),
                          RouterCalibConfig(k=1)) == 0.0


def test_incremental_logits_match_fresh(rng):
    x = rng.standard_normal((20, 5))
    w = rng.standard_normal((5, 6))
    spec = QuantSpec(3)
    obj = DualObjective(x, w, spec, RouterCalibConfig(k=2, kl_ratio=0.5))
    p = minmax_params(w, spec)
    obj(p)
    p2 = p.copy()
    p2.scale[3] *= 0.8
    p2.zero[1] += 1
    assert obj(p2) == DualObjective(x, w, spec, obj.config)(p2)


def test_rejects_empty_and_per_tensor(rng):
    w = rng.standard_normal((4, 3))
    with pytest.raises(ValueError, match="empty"):
        calibrate_router(np.zeros((0, 4)), w, QuantSpec(4), RouterCalibConfig())
    with pytest.raises(ValueError, match="per-channel"):
        DualObjective(np.ones((2, 4)), w, QuantSpec(4, granularity="per-tensor"), RouterCalibConfig())


def test_holdout_is_every_fifth():
    opt, held = holdout_split(np.zeros(100))
    assert held.sum() == 20 and np.all(held[4::5] == 1) and opt.sum() == 80
    tokens = np.array([7, 3, 7, 7, 3, 9, 3, 7, 7, 7])
    opt, held = holdout_split(tokens, np.array([3, 7, 9]))
    np.testing.assert_array_equal(held, [1, 1, 0])
    np.testing.assert_array_equal(opt, [2, 5, 1])
    with pytest.raises(ValueError):
        holdout_split(tokens, np.array([3, 7]))


def router_case(seed, n=8, d=16, tokens=200):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((tokens, d))
    x[:, 2] *= 8
    return x, rng.standard_normal((d, n)) * 0.5, rng.normal(0, 0.3, n)


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("lam,ratio", [(0.0, 0.0), (1.0, 0.5), (10.0, 1.0)])
def test_calibration_never_worse_on_optimized_rows(seed, lam, ratio):
    x, w, b = router_case(seed)
    params, rep = calibrate_router(x, w, QuantSpec(3), RouterCalibConfig(lam, ratio, 2), b)
    assert rep.calib_after.objective <= rep.calib_before.objective
    assert rep.heldout_tokens == 40 and rep.calib_tokens == 160


def test_singleton_grid_and_disabled_are_identity():
    x, w, b = router_case(3)
    spec = QuantSpec(4)
    for kwargs in ({"config": RouterCalibConfig(grid=(1.0,))}, {"config": RouterCalibConfig(), "align": False}):
        cfg = kwargs.pop("config")
        params, rep = calibrate_router(x, w, spec, cfg, b, **kwargs)
        init = minmax_params(w, spec)
        assert np.array_equal(params.scale, init.scale) and np.array_equal(params.zero, init.zero)
        assert rep.heldout_before == rep.heldout_after


def test_calibration_is_deterministic():
    x, w, b = router_case(4)
    a = calibrate_router(x, w, QuantSpec(4), RouterCalibConfig(), b)
    c = calibrate_router(x, w, QuantSpec(4), RouterCalibConfig(), b)
    assert np.array_equal(a[0].scale, c[0].scale) and a[1].to_dict() == c[1].to_dict()


def test_tiny_set_uses_all_rows():
    x, w, b = router_case(5, tokens=3)
    _, rep = calibrate_router(x, w, QuantSpec(4), RouterCalibConfig(), b)
    assert rep.heldout_tokens == rep.calib_tokens == 3
