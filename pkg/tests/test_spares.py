import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdsurv.cqr import QuantileGrid
from hdsurv.spares import (FixedSelector, LassoSelector, LinearData, RankDeficiencyError,
                           ResampleError, ResampleInference, ScreeningSelector, _inference,
                           delta_method_se, fused_hdcqr, partial_regression, spares_fit)
from hdsurv.survdata import SurvivalDataset


def _linear(n, p, seed, k=5, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[:k] = 1.0
    return LinearData(X, X @ beta + noise * rng.normal(size=n)), beta


def test_simple_regression_slope():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=30), rng.normal(size=30)
    xc, yc = x - x.mean(), y - y.mean()
    d = LinearData(x[:, None], y)
    assert partial_regression(d, [], 0) == pytest.approx((xc @ yc) / (xc @ xc), rel=1e-12)


def test_normal_equations_oracle():
    rng = np.random.default_rng(1)
    d = LinearData(rng.normal(size=(20, 3)), rng.normal(size=20))
    A = np.column_stack([np.ones(20), d.X])
    coef = np.linalg.solve(A.T @ A, A.T @ d.y)[1:]
    # j outside S uses the partialling route, j inside S the joint fit
    assert partial_regression(d, [0, 2], 1) == pytest.approx(coef[1], abs=1e-10)
    assert partial_regression(d, [0, 1, 2], 1) == pytest.approx(coef[1], abs=1e-10)
    assert partial_regression(d, [0], 0) == pytest.approx(partial_regression(d, [], 0), abs=1e-12)


def test_cox_and_cqr_families_run():
    rng = np.random.default_rng(2)
    n = 80
    X = rng.normal(size=(n, 3))
    ds = SurvivalDataset(np.exp(X[:, 0] + rng.normal(size=n)), rng.random(n) < 0.8, X)
    b = partial_regression(ds, [1], 0, "cox")
    assert np.isfinite(b) and b < 0
    v = partial_regression(ds, [1], 0, ("cqr", [0.25, 0.5]))
    assert v.shape == (2,) and np.all(v > 0)


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(20, 3))
    X[:, 2] = X[:, 0] - X[:, 1]
    d = LinearData(X, rng.normal(size=20), ("a", "b", "c"))
    with pytest.raises(RankDeficiencyError, match="c|a|b"):
        partial_regression(d, [0, 1], 2)
    with pytest.raises(RankDeficiencyError, match="collinear"):
        partial_regression(d, [0, 1, 2], 0)


def test_hand_covariance_B2_n4():
    I = np.array([[1, 1, 0, 0], [0, 1, 1, 0]], bool)
    T = np.array([[1.0], [3.0]])
    # cov_i = sum_b (I_bi - mean_i)(T_b - mean) / 1 = (-1, 0, 1, 0)
    assert delta_method_se(I, T)[0] == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_se_matches_two_pass_literal():
    rng = np.random.default_rng(4)
    I = rng.random((37, 11)) < 0.5
    T = rng.normal(size=(37, 4))
    B, n = I.shape
    ref = np.zeros(4)
    for j in range(4):
        tbar = sum(T[:, j]) / B
        tot = 0.0
        for i in range(n):
            ibar = sum(I[:, i]) / B
            c = sum((I[b, i] - ibar) * (T[b, j] - tbar) for b in range(B)) / (B - 1)
            tot += c * c
        ref[j] = np.sqrt(tot)
    np.testing.assert_allclose(delta_method_se(I, T), ref, rtol=1e-12, atol=1e-12)


def test_corrections():
    rng = np.random.default_rng(5)
    I = rng.random((50, 20)) < 0.5
    T = rng.normal(size=(50, 3))
    raw = delta_method_se(I, T)
    assert np.all(delta_method_se(I, T, bias_correction=True) <= raw)
    # half splits of n = 20: variance factor n (n - 1) / (n - m)^2
    I2 = np.zeros((50, 20), bool)
    for b in range(50):
        I2[b, rng.permutation(20)[:10]] = True
    np.testing.assert_allclose(delta_method_se(I2, T, split_correction=True) ** 2,
                               delta_method_se(I2, T) ** 2 * 20 * 19 / 100, rtol=1e-12)


def test_degenerate_zero_se():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 3))
    d = LinearData(X, X @ [1.0, 0.0, -2.0] + 0.5)
    with pytest.warns(UserWarning, match="zero standard error"):
        res = spares_fit(d, FixedSelector((0, 1, 2)), B=5, seed=0)
    assert res.degenerate_se.all() and np.all(res.ses == 0)
    res2 = _inference(res.inclusion, np.tile([1.0, 0.0, -2.0], (5, 1)), 0, d.feature_names,
                      False, False)
    np.testing.assert_array_equal(res2.ses, 0.0)
    np.testing.assert_array_equal(res2.p_values, [0.0, 1.0, 0.0])
    assert res2.degenerate_se.all()


def test_reproducible_and_thread_invariant():
    d, _ = _linear(60, 30, seed=7)
    a = spares_fit(d, LassoSelector(eta=0.3), B=12, seed=3)
    b = spares_fit(d, LassoSelector(eta=0.3), B=12, seed=3, threads=3)
    assert a.to_json() == b.to_json()
    np.testing.assert_array_equal(a.inclusion.sum(axis=1), 30)
    c = spares_fit(d, LassoSelector(eta=0.3), B=12, seed=4)
    assert not np.array_equal(a.inclusion, c.inclusion)


def test_oracle_selector_recovers_truth():
    d, beta = _linear(500, 1000, seed=8)
    res = spares_fit(d, FixedSelector(tuple(range(5))), B=40, seed=0)
    assert np.all(np.abs(res.estimates[:5] - 1.0) <= 2 * res.ses[:5])
    # nulls centred at zero on average
    assert abs(res.estimates[5:].mean()) < 0.01


def test_signal_found_with_lasso_selector():
    d, _ = _linear(200, 100, seed=9)
    res = spares_fit(d, LassoSelector(eta=0.15), B=30, seed=0)
    assert np.all(res.p_values[:5] < 1e-6)
    assert np.mean(res.p_values[5:] < 0.05) < 0.2


def test_oversized_selection_skipped():
    d, _ = _linear(40, 30, seed=10)
    with pytest.raises(ResampleError):
        with pytest.warns(UserWarning, match="skipped"):
            spares_fit(d, FixedSelector(tuple(range(25))), B=4, seed=0)

    calls = {"k": 0}

    def flaky(half, rng):
        calls["k"] += 1
        return np.arange(25) if calls["k"] == 1 else np.array([0, 1])

    with pytest.warns(UserWarning, match="1 resamples skipped"):
        res = spares_fit(d, flaky, B=4, seed=0)
    assert res.B == 3 and res.skipped == 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_subnormal=False), st.floats(1e-3, 10))
def test_ci_pvalue_consistency(est, se):
    I = np.array([[1, 0], [0, 1], [1, 1]], bool)
    res = _inference(I, np.array([[est - se], [est + se], [est]]), 0, ("x",), False, False)
    lo, hi, pv = res.ci_lower[0], res.ci_upper[0], res.p_values[0]
    z = abs(res.estimates[0]) / res.ses[0]
    if abs(z - 1.959963984540054) > 1e-9:
        assert (pv < 0.05) == (lo > 0 or hi < 0)
    np.testing.assert_allclose([lo, hi], res.estimates[0] + np.array([-1, 1]) * 1.959963984540054
                               * res.ses[0])


def test_serialization(tmp_path):
    d, _ = _linear(40, 6, seed=11)
    res = spares_fit(d, FixedSelector((0,)), B=5, seed=1)
    back = ResampleInference.from_dict(json.loads(res.to_json()))
    assert back.to_json() == res.to_json()
    res.write_csv(tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 7


def _cqr_data(n, seed, hetero):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = rng.random(n)
    eps = rng.normal(size=n)
    logT = 0.5 * x1 + ((1 + 1.5 * x2) * eps if hetero else 0.3 * x2 + eps)
    logC = rng.normal(2.0, 1.0, size=n)
    return SurvivalDataset(np.exp(np.minimum(logT, logC)), logT <= logC, np.column_stack([x1, x2]))


def test_fused_hdcqr_location_shift_flat():
    ds = _cqr_data(300, seed=12, hetero=False)
    grid = QuantileGrid([0.2, 0.35, 0.5, 0.65])
    res = fused_hdcqr(ds, FixedSelector((0,)), grid, B=20, seed=0)
    b = res.coefficients[:, 0]
    se = np.array([inf.ses[0] for inf in res.inferences])
    assert np.all(np.abs(b - b.mean()) <= 2 * se)
    np.testing.assert_array_equal(res.coef(0.3), res.coefficients[1])


def test_fused_hdcqr_heteroscedastic_slope():
    ds = _cqr_data(300, seed=13, hetero=True)
    grid = QuantileGrid([0.2, 0.35, 0.5, 0.65])
    res = fused_hdcqr(ds, ScreeningSelector(d=1), grid, B=20, seed=0)
    slope = np.polyfit(grid.taus, res.coefficients[:, 1], 1)[0]
    assert slope > 0


def test_single_level_grid_equals_spares_cqr():
    ds = _cqr_data(120, seed=14, hetero=False)
    a = fused_hdcqr(ds, FixedSelector((0,)), [0.4], B=6, seed=2)
    b = spares_fit(ds, FixedSelector((0,)), ("cqr", [0.4]), B=6, seed=2)
    assert a.inferences[0].to_json() == b.to_json()
