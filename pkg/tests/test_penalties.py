import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdsurv.penalties import (PenaltyError, PenaltySpec, UnsupportedOperation, penalty_term,
                              penalty_value, prox, rbf_column_kernel, scad_derivative,
                              scad_value)


def test_values():
    assert penalty_value(PenaltySpec("lasso"), [1, -2]) == 3
    assert penalty_value(PenaltySpec("elastic_net", alpha=0.5), [1, -2]) == 4
    assert penalty_value(PenaltySpec("fused_lasso"), [1, 3, 2]) == (6, 3)
    assert penalty_value(PenaltySpec("ridge"), [1, -2]) == 5
    g = PenaltySpec("group_lasso", groups=[[0, 1], [2]])
    assert penalty_value(g, [3, 4, -1]) == pytest.approx(6.0)


def test_scad_derivative_examples():
    assert scad_derivative(1.0, 3.7, 0.5) == 1.0
    assert scad_derivative(1.0, 3.7, 2.0) == pytest.approx(1.7 / 2.7, rel=1e-14)
    assert scad_derivative(1.0, 3.7, 3.7) == 0.0
    assert scad_derivative(1.0, 3.7, 10.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(2.1, 6.0))
def test_scad_continuity_and_value_integral(eta, alpha):
    eps = 1e-13
    for knot in (eta, alpha * eta):
        assert abs(scad_derivative(eta, alpha, knot) - scad_derivative(eta, alpha, knot + eps)) < 1e-12 * max(1, eta) + 1e-11
    # value is the integral of the derivative (trapezoid on a fine grid)
    b = np.linspace(0, 1.5 * alpha * eta, 20001)
    d = scad_derivative(eta, alpha, b)
    integ = np.concatenate([[0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(b))])
    np.testing.assert_allclose(scad_value(eta, alpha, b), integ, atol=1e-6 * eta * eta * alpha)


def test_validation():
    with pytest.raises(PenaltyError):
        PenaltySpec("lasso", eta=0)
    with pytest.raises(PenaltyError):
        PenaltySpec("scad", alpha=2.0)
    with pytest.raises(PenaltyError):
        PenaltySpec("elastic_net", alpha=1.0)
    with pytest.raises(PenaltyError):
        PenaltySpec("group_lasso", groups=[[0, 1], [1, 2]])
    with pytest.raises(PenaltyError):
        PenaltySpec("kernel_elastic_net", sigma=[[1, 2], [2, 1]])
    with pytest.raises(PenaltyError):
        penalty_value(PenaltySpec("adaptive_lasso", weights=[1, 1]), [1, 2, 3])
    assert PenaltySpec("scad").alpha == 3.7


def test_json_round_trip():
    spec = PenaltySpec("group_lasso", eta=0.3, groups=[[1], [0, 2]])
    assert PenaltySpec.from_json(json.dumps(spec.to_dict())).to_dict() == spec.to_dict()


def test_prox_examples():
    lasso = PenaltySpec("lasso", eta=1.0)
    assert prox(lasso, [1.5], 1.0)[0] == 0.5
    assert prox(lasso, [0.5], 1.0)[0] == 0.0
    g = PenaltySpec("group_lasso", eta=1.0, groups=[[0, 1]])
    np.testing.assert_allclose(prox(g, [3.0, 4.0], 1.0), [2.4, 3.2], atol=1e-15)
    with pytest.raises(UnsupportedOperation):
        prox(PenaltySpec("fused_lasso"), [1.0, 2.0], 1.0)


def test_adaptive_unit_weights_equals_lasso():
    z = np.array([-2.0, -0.3, 0.0, 0.7, 1.9])
    a = prox(PenaltySpec("adaptive_lasso", 0.5, weights=np.ones(5)), z, 1.3)
    b = prox(PenaltySpec("lasso", 0.5), z, 1.3)
    assert np.array_equal(a, b)


def _grid_prox(spec, z, step, h=1e-3, radius=None):
    """Dense grid minimizer of 0.5||y - z||^2 + step * penalty_term(y)."""
    r = 3.5 if radius is None else radius
    axis = np.arange(-r, r + h / 2, h)
    best, arg = np.inf, None
    if z.size == 1:
        vals = [0.5 * (y - z[0]) ** 2 + step * penalty_term(spec, np.array([y])) for y in axis]
        i = int(np.argmin(vals))
        return np.array([axis[i]])
    # 2-D: coarse grid, then refine around the best cell
    coarse = np.arange(-r, r + 0.025, 0.05)
    for y in itertools.product(coarse, coarse):
        y = np.array(y)
        v = 0.5 * np.sum((y - z) ** 2) + step * penalty_term(spec, y)
        if v < best:
            best, arg = v, y
    fine = np.arange(-0.06, 0.06 + h / 2, h)
    center = arg
    for d in itertools.product(fine, fine):
        y = center + np.array(d)
        v = 0.5 * np.sum((y - z) ** 2) + step * penalty_term(spec, y)
        if v < best:
            best, arg = v, y
    return arg


@pytest.mark.parametrize("spec", [
    PenaltySpec("lasso", 0.7),
    PenaltySpec("ridge", 0.7),
    PenaltySpec("elastic_net", 0.7, alpha=0.3),
    PenaltySpec("adaptive_lasso", 0.7, weights=[0.5]),
    PenaltySpec("scad", 0.7),
])
def test_prox_1d_grid_oracle(spec):
    rng = np.random.default_rng(0)
    for z in np.concatenate([rng.uniform(-3, 3, 15), [0.0, 0.7, -2.59, 1.4]]):
        z = np.array([z])
        y = prox(spec, z, 0.8)
        yg = _grid_prox(spec, z, 0.8)
        assert abs(y[0] - yg[0]) <= 1e-3


@pytest.mark.parametrize("spec", [
    PenaltySpec("group_lasso", 0.8, groups=[[0, 1]]),
    PenaltySpec("kernel_elastic_net", 0.6, alpha=0.4, sigma=[[1.0, 0.6], [0.6, 1.0]]),
    PenaltySpec("elastic_net", 0.6, alpha=0.6),
])
def test_prox_2d_grid_oracle(spec):
    rng = np.random.default_rng(1)
    for _ in range(4):
        z = rng.uniform(-2.5, 2.5, 2)
        y = prox(spec, z, 1.0)
        yg = _grid_prox(spec, z, 1.0)
        obj = lambda v: 0.5 * np.sum((v - z) ** 2) + penalty_term(spec, v)
        assert obj(y) <= obj(yg) + 1e-9
        assert np.max(np.abs(y - yg)) <= 2e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-100, 5), st.floats(-5, -1e-100)),
                min_size=1, max_size=6),
       st.sampled_from(["lasso", "elastic_net", "group_lasso", "kernel_elastic_net", "ridge"]))
def test_penalty_nonnegative_zero_iff_zero(beta, kind):
    beta = np.array(beta)
    p = beta.size
    kw = {}
    if kind == "group_lasso":
        kw["groups"] = [list(range(p))]
    if kind == "kernel_elastic_net":
        kw["sigma"] = np.eye(p)
    v = penalty_value(PenaltySpec(kind, **kw), beta)
    assert v >= 0
    assert (v == 0) == bool(np.all(beta == 0))


def test_rbf_column_kernel_properties():
    rng = np.random.default_rng(0)
    K = rbf_column_kernel(rng.normal(size=(30, 6)))
    assert np.allclose(np.diag(K), 1.0)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-10
