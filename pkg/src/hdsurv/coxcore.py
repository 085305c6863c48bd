"""Cox partial likelihood (Breslow ties), its derivatives, and Newton MPLE."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nonparam import StepFunction
from .survdata import DataError, DegenerateDataError, SurvivalDataset


class CoxRiskSets:
    """Risk-set bookkeeping for fixed ``(time, event)``.

    All sums over risk sets ``{j : Y_j >= Y_i}`` are computed with a single
    reverse cumulative pass over the time-sorted subjects, so each
    evaluation is O(n) after the initial sort.
    """

    def __init__(self, time, event):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=bool)
        self.n = time.size
        self.order = np.argsort(time, kind="stable")
        ts = time[self.order]
        self.event_sorted = event[self.order]
        # first / last sorted position of each subject's tie group
        self.first = np.searchsorted(ts, ts, side="left")
        self.last = np.searchsorted(ts, ts, side="right") - 1
        self.time_sorted = ts
        self.n_events = int(event.sum())

    def _risk_sums(self, w_sorted):
        return np.cumsum(w_sorted[::-1])[::-1][self.first]

    def _log_s0(self, es):
        """log sum_{j in R_i} exp(eta_j) per sorted position, without underflow."""
        return np.logaddexp.accumulate(es[::-1])[::-1][self.first]

    def _log_c(self, log_s0, power=1):
        """log of sum over events k with Y_k <= Y_i of S0_k^-power."""
        v = np.where(self.event_sorted, -power * log_s0, -np.inf)
        return np.logaddexp.accumulate(v)[self.last]

    def loss(self, eta):
        """Negative log partial likelihood at linear predictor ``eta``."""
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            return np.inf
        es = eta[self.order]
        ev = self.event_sorted
        return float(-np.sum(es[ev] - self._log_s0(es)[ev]))

    def loss_grad(self, eta):
        """Loss and its gradient with respect to ``eta`` (per-subject)."""
        eta = np.asarray(eta, dtype=float)
        es = eta[self.order]
        ev = self.event_sorted
        ls0 = self._log_s0(es)
        loss = float(-np.sum(es[ev] - ls0[ev]))
        # w_i * sum_{k: Y_k <= Y_i} 1/S0_k is at most the number of events
        g_sorted = np.exp(es + self._log_c(ls0)) - ev
        g = np.empty_like(g_sorted)
        g[self.order] = g_sorted
        return loss, g

    def grad_hess_diag(self, eta):
        """Gradient and Hessian diagonal with respect to ``eta``."""
        eta = np.asarray(eta, dtype=float)
        es = eta[self.order]
        ev = self.event_sorted
        ls0 = self._log_s0(es)
        wc = np.exp(es + self._log_c(ls0))
        w2c2 = np.exp(2 * es + self._log_c(ls0, 2))
        g = np.empty(self.n)
        h = np.empty(self.n)
        g[self.order] = wc - ev
        h[self.order] = wc - w2c2
        return g, h

    def _risk_means(self, Xs, es, ls0):
        """Risk-set weighted means S1/S0 of the sorted covariates at each position."""
        m = es.max()
        if ls0.min() - m > -600:
            w = np.exp(es - m)
            s0 = self._risk_sums(w)
            s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1][self.first]
            return s1 / s0[:, None]
        # wide spread of eta: rescaled backward recursion over sorted positions
        n = es.size
        ls_pos = np.logaddexp.accumulate(es[::-1])[::-1]
        acc = np.zeros((n, Xs.shape[1]))
        nxt = np.zeros(Xs.shape[1])
        for i in range(n - 1, -1, -1):
            ratio = np.exp(ls_pos[i + 1] - ls_pos[i]) if i + 1 < n else 0.0
            nxt = np.exp(es[i] - ls_pos[i]) * Xs[i] + ratio * nxt
            acc[i] = nxt
        return acc[self.first]

    def score_hessian(self, X, eta):
        """Gradient and Hessian of the loss with respect to ``beta`` (``eta = X beta``)."""
        eta = np.asarray(eta, dtype=float)
        Xs = X[self.order]
        es = eta[self.order]
        ev = self.event_sorted
        ls0 = self._log_s0(es)
        wc = np.exp(es + self._log_c(ls0))
        grad = Xs.T @ (wc - ev)
        # Hessian = X' diag(w c) X - sum_events a a',  a = S1 / S0 at each event
        a = self._risk_means(Xs, es, ls0)[ev]
        hess = Xs.T @ (wc[:, None] * Xs) - a.T @ a
        hess = 0.5 * (hess + hess.T)
        return grad, hess

    def breslow(self, eta) -> StepFunction:
        eta = np.asarray(eta, dtype=float)
        es = eta[self.order]
        ls0 = self._log_s0(es)
        ev = self.event_sorted
        ts = self.time_sorted
        ut, start = np.unique(ts[ev], return_index=True)
        if ut.size == 0:
            return StepFunction([], [], 0.0)
        d = np.bincount(np.searchsorted(ut, ts[ev]), minlength=ut.size)
        first_pos = np.searchsorted(ts, ut, side="left")
        inc = d * np.exp(-ls0[first_pos])
        return StepFunction(ut, np.cumsum(inc), 0.0)


def _check_beta(ds, beta):
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != ds.p:
        raise DataError(f"beta has length {beta.size}, dataset has p = {ds.p}")
    if np.any(np.isnan(beta)):
        raise DataError("beta contains NaN")
    return beta


def neg_log_partial_likelihood(ds: SurvivalDataset, beta) -> float:
    beta = _check_beta(ds, beta)
    if not np.all(np.isfinite(beta)):
        return np.inf
    return CoxRiskSets(ds.time, ds.event).loss(ds.X @ beta)


def score_and_hessian(ds: SurvivalDataset, beta) -> dict:
    beta = _check_beta(ds, beta)
    g, H = CoxRiskSets(ds.time, ds.event).score_hessian(ds.X, ds.X @ beta)
    return {"gradient": g, "hessian": H}


@dataclass
class CoxFit:
    beta: np.ndarray
    neg_log_pl: float
    score_norm: float
    iterations: int
    converged: bool
    baseline_chf: StepFunction
    separation_warning: bool = False
    feature_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def linear_predictor(self, X):
        return np.asarray(X, dtype=float) @ self.beta

    def predict_survival(self, x, t):
        """Absolute survival ``exp(-Lambda_0(t) exp(x'beta))``."""
        return np.exp(-self.baseline_chf(t) * np.exp(float(np.asarray(x) @ self.beta)))

    def to_dict(self):
        return {
            "beta": self.beta.tolist(),
            "feature_names": list(self.feature_names),
            "neg_log_pl": self.neg_log_pl,
            "score_norm": self.score_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "separation_warning": self.separation_warning,
            "baseline_chf": self.baseline_chf.to_dict(),
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        extra = {k: v for k, v in d.items() if k not in {
            "beta", "feature_names", "neg_log_pl", "score_norm", "iterations", "converged",
            "separation_warning", "baseline_chf"}}
        return cls(np.asarray(d["beta"], float), d["neg_log_pl"], d["score_norm"],
                   d["iterations"], d["converged"], StepFunction.from_dict(d["baseline_chf"]),
                   d.get("separation_warning", False), tuple(d.get("feature_names", ())), extra)


def fit_mple(ds: SurvivalDataset, tol=1e-8, max_iter=100, beta0=None,
             separation_bound=20.0) -> CoxFit:
    """Maximum partial likelihood by Newton's method with step halving.

    Requires fewer covariates than events; use :mod:`hdsurv.coxnet` otherwise.
    Separation (monotone likelihood) is flagged when some ``|beta_j| * sd(X_j)``
    exceeds ``separation_bound``; the gradient can vanish numerically long
    before the coefficients reach infinity, so convergence alone does not
    rule it out.
    """
    ds.require_events()
    if ds.p >= ds.n_events:
        raise DegenerateDataError(
            f"p = {ds.p} >= number of events = {ds.n_events}: the partial likelihood is "
            "over-parameterized; use a penalized fit (hdsurv.coxnet)")
    rs = CoxRiskSets(ds.time, ds.event)
    X = ds.X
    sd = X.std(axis=0)
    beta = np.zeros(ds.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    loss = rs.loss(X @ beta)
    converged = False
    it = 0
    g, H = rs.score_hessian(X, X @ beta)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        for _ in range(21):
            cand = beta - t * step
            new_loss = rs.loss(X @ cand)
            if new_loss <= loss + 1e-12 * max(1.0, abs(loss)):
                break
            t *= 0.5
        beta, loss = cand, new_loss
        g, H = rs.score_hessian(X, X @ beta)
        if np.max(np.abs(beta) * sd, initial=0.0) > 10 * separation_bound:
            break
    else:
        converged = bool(np.max(np.abs(g)) <= tol)
    sep = bool(np.max(np.abs(beta) * sd, initial=0.0) > separation_bound)
    if sep:
        warnings.warn("coefficients diverging: possible monotone likelihood (separation)")
    return CoxFit(beta=beta, neg_log_pl=loss, score_norm=float(np.max(np.abs(g), initial=0.0)),
                  iterations=it, converged=converged and not sep,
                  baseline_chf=rs.breslow(X @ beta), separation_warning=sep,
                  feature_names=ds.feature_names)
