import json

import numpy as np
import pytest
from scipy import stats

from hdsurv.coxcore import fit_mple
from hdsurv.scr import ScrParameters, conditional_log_likelihood
from hdsurv.simulate import (CompetingRisksData, SimSpec, covariates, draw_frailty,
                             laguerre_rule, observation_patterns, oracle_quadrature_likelihood,
                             simulate, spec_to_json)
from hdsurv.survdata import IllnessDeathDataset, IllnessDeathRecord, SurvivalDataset

PHI = [[0.5, 1.2], [0.3, 0.9], [0.6, 1.5]]


def test_aft_extreme_value_gives_weibull():
    ds = simulate(SimSpec("aft", n=10_000, p=2, family="extreme_value",
                          baseline={"intercept": 0.5, "sigma": 0.8}, seed=0))
    # log T = 0.5 + 0.8 log E  =>  T ~ Weibull(shape 1/0.8, scale e^0.5)
    ks = stats.kstest(ds.time, stats.weibull_min(1 / 0.8, scale=np.exp(0.5)).cdf)
    assert ks.statistic < 1.358 / np.sqrt(ds.n)
    assert ds.event.all()


def test_aft_families_log_scale():
    for fam, dist in (("normal", stats.norm), ("logistic", stats.logistic)):
        ds = simulate(SimSpec("aft", n=10_000, p=1, family=fam, seed=1))
        assert stats.kstest(np.log(ds.time), dist.cdf).statistic < 1.358 / 100
    with pytest.raises(ValueError, match="family"):
        SimSpec("aft", family="gamma")


def test_cox_null_and_weibull_baseline():
    ds = simulate(SimSpec("cox", n=10_000, p=2, baseline={"scale": 2.0, "shape": 1.5}, seed=2))
    assert np.all(np.abs(fit_mple(ds).beta) < 0.05)
    ks = stats.kstest(ds.time, lambda t: 1 - np.exp(-2.0 * t ** 1.5))
    assert ks.statistic < 1.358 / 100


def test_cox_signal_recovered():
    ds = simulate(SimSpec("cox", n=5000, p=2, beta=[0.7, -0.4], censoring={"fraction": 0.3},
                          seed=3))
    np.testing.assert_allclose(fit_mple(ds).beta, [0.7, -0.4], atol=0.06)


def test_censoring_fraction_within_three_percent():
    for kind, target in (("cox", 0.2), ("aft", 0.5), ("illness_death", 0.4)):
        spec = SimSpec(kind, n=10_000, p=2, censoring={"fraction": target}, theta=1.0,
                       baseline={"phi": PHI} if kind == "illness_death" else {}, seed=4)
        ds = simulate(spec)
        frac = np.mean(~ds.d2) if kind == "illness_death" else np.mean(~ds.event)
        assert abs(frac - target) <= 0.03


def test_illness_death_patterns_and_invariants():
    spec = SimSpec("illness_death", n=10_000, p=2, baseline={"phi": PHI}, theta=2.0,
                   h=[[0.3, 0.0], [0.0, 0.3], [0.2, 0.2]], censoring={"fraction": 0.3}, seed=5)
    ds = simulate(spec)
    assert isinstance(ds, IllnessDeathDataset)
    counts = observation_patterns(ds)
    assert all(v > 0 for v in counts.values()) and sum(counts.values()) == ds.n
    # round trip through records re-runs every record check
    IllnessDeathDataset.from_records(ds.records)


def test_competing_risks():
    spec = SimSpec("competing", n=20_000, p=1, beta=[0.0], baseline={"p1": 0.4}, seed=6)
    data = simulate(spec)
    assert isinstance(data, CompetingRisksData)
    assert np.mean(data.cause == 1) == pytest.approx(0.4, abs=0.015)
    t = 1.0
    emp = np.mean((data.cause == 1) & (data.time <= t))
    assert emp == pytest.approx(0.4 * (1 - np.exp(-t)), abs=0.015)
    assert isinstance(data.as_survival(1), SurvivalDataset)


def test_determinism_prefix_stability_and_equicorrelation():
    a = simulate(SimSpec("cox", n=3000, p=3, seed=7, censoring={"rate": 0.5}))
    b = simulate(SimSpec("cox", n=3000, p=3, seed=7, censoring={"rate": 0.5}))
    c = simulate(SimSpec("cox", n=1500, p=3, seed=7, censoring={"rate": 0.5}))
    assert a.equals(b)
    assert a.subset(np.arange(1500)).equals(c)
    Z = covariates(50_000, 4, rho=0.5, rng=8)
    C = np.corrcoef(Z.T)
    assert np.all(np.abs(C[np.triu_indices(4, 1)] - 0.5) < 0.02)
    spec = SimSpec("illness_death", n=5, p=1, baseline={"phi": PHI}, seed=1)
    assert SimSpec.from_dict(json.loads(spec_to_json(spec))) == spec


def test_frailty_moments():
    for theta in (0.5, 2.0):
        g = draw_frailty(theta, 10 ** 6, np.random.default_rng(9))
        assert abs(g.mean() - 1) < 0.01
        assert abs(g.var() / theta - 1) < 0.05


def _rec():
    return IllnessDeathRecord(0.7, True, 1.6, True, np.array([0.4]))


def test_oracle_degenerate_frailty():
    prm = ScrParameters(PHI, 1e-8, [[0.5], [-0.2], [0.3]])
    nofrailty = np.exp(conditional_log_likelihood(prm, _rec(), 1.0))
    assert oracle_quadrature_likelihood(prm, _rec()) == pytest.approx(nofrailty, rel=1e-6)


def test_oracle_node_refinement():
    rng = np.random.default_rng(10)
    for theta in (0.1, 1.0, 5.0):
        prm = ScrParameters(PHI, theta, [rng.normal(size=1) for _ in range(3)])
        a = oracle_quadrature_likelihood(prm, _rec(), 64)
        b = oracle_quadrature_likelihood(prm, _rec(), 128)
        assert abs(a / b - 1) < 1e-9


def test_laguerre_rule_moments():
    for alpha in (-0.5, 0.0, 3.0, 1e6):
        x, w = laguerre_rule(64, alpha)
        assert w.sum() == pytest.approx(1.0, rel=1e-12)
        # normalized moments of x^alpha e^-x: E[x] = alpha + 1, E[x^2] = (alpha + 1)(alpha + 2)
        assert w @ x == pytest.approx(alpha + 1, rel=1e-10)
        assert w @ x ** 2 == pytest.approx((alpha + 1) * (alpha + 2), rel=1e-10)
