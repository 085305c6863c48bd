"""Accelerated failure time fits by Buckley-James imputation and the Dantzig selector.

The AFT model ``log T = X'beta + e`` is fitted by alternating between
imputing censored log-times from the Kaplan-Meier estimate of the residual
distribution and solving the Dantzig linear program

    min ||W beta||_1   s.t.   ||X' P_n (T*(beta) - X beta)||_inf <= eta_q,

with ``P_n = I - 11'/n``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_ordered
from .coxnet import stratified_folds
from .lp import LPError, linprog
from .survdata import DegenerateDataError, SurvivalDataset


def center(A):
    """``P_n A``: subtract column means."""
    A = np.asarray(A, dtype=float)
    return A - A.mean(axis=0)


def _residual_km(e, event):
    """KM of residuals with the largest residual forced to be an event."""
    order = np.lexsort((~event, e))          # events first within ties
    es, ds = e[order], event[order].copy()
    ds[-1] = True                            # tail correction: no mass left beyond max
    n = es.size
    at_risk = n - np.arange(n)
    # collapse ties: one factor per unique event residual
    knots, idx = np.unique(es[ds], return_index=False, return_inverse=True)
    d = np.bincount(idx, minlength=knots.size)
    r = at_risk[np.searchsorted(es, knots, side="left")]
    S = np.cumprod(1.0 - d / r)
    return knots, S


def buckley_james_impute(ds: SurvivalDataset, beta) -> np.ndarray:
    """``T*_i = log Y_i`` for events; for censored ``i``,
    ``log Y_i + int_{e_i}^inf S(u) du / S(e_i)`` with ``S`` the residual KM.
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if not ds.event.any():
        raise DegenerateDataError("all observations censored: residual KM undefined")
    logy = np.log(ds.time)
    e = logy - ds.X @ beta
    ev = ds.event
    knots, S = _residual_km(e, ev)
    # area under S to the right of each knot: sum_l S_l (t_{l+1} - t_l), S_K = 0
    seg = S[:-1] * np.diff(knots)
    tail = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    out = logy.copy()
    cens = np.flatnonzero(~ev)
    if cens.size == 0:
        return out
    ec = e[cens]
    k = np.searchsorted(knots, ec, side="right")     # number of knots <= e
    S_e = np.where(k > 0, S[np.maximum(k - 1, 0)], 1.0)
    nxt = knots[np.minimum(k, knots.size - 1)]
    area = np.where(k < knots.size, S_e * (nxt - ec) + tail[np.minimum(k, knots.size - 1)], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(S_e > 0, area / S_e, 0.0)
    out[cens] = logy[cens] + shift
    return out


def dantzig_linear(X, Y, eta_q, weights=None) -> np.ndarray:
    """``min sum_j w_j |beta_j|  s.t.  ||X'(Y - X beta)||_inf <= eta_q`` as an LP."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if eta_q < 0:
        raise ValueError("eta_q must be non-negative")
    p = X.shape[1]
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.size != p or np.any(w < 0):
        raise ValueError("weights must be non-negative with length p")
    G = X.T @ X
    r = X.T @ Y
    if np.max(np.abs(r), initial=0.0) <= eta_q:
        return np.zeros(p)
    A_ub = np.vstack([np.hstack([G, -G]), np.hstack([-G, G])])
    b_ub = np.concatenate([r + eta_q, eta_q - r])
    try:
        res = linprog(np.concatenate([w, w]), A_ub=A_ub, b_ub=b_ub)
    except LPError as exc:
        raise LPError(f"Dantzig program failed: {exc}") from exc
    return res.x[:p] - res.x[p:]


@dataclass
class DantzigFit:
    beta: np.ndarray
    eta_q: float
    iterations: int
    converged: bool
    imputed_outcomes: np.ndarray
    intercept: float = 0.0
    weights: np.ndarray | None = None
    family: str | None = None
    feature_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def constraint_residual(self, X):
        """``||X' P_n (T* - X beta)||_inf`` at the stored imputed outcomes."""
        Xc = center(X)
        return float(np.max(np.abs(Xc.T @ (center(self.imputed_outcomes) - Xc @ self.beta))))

    def predict_log_time(self, X):
        return self.intercept + np.asarray(X, dtype=float) @ self.beta

    def to_dict(self):
        return {"beta": self.beta.tolist(), "eta_q": self.eta_q, "iterations": self.iterations,
                "converged": self.converged, "intercept": self.intercept,
                "imputed_outcomes": self.imputed_outcomes.tolist(),
                "weights": None if self.weights is None else self.weights.tolist(),
                "family": self.family, "feature_names": list(self.feature_names), **self.extra}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        core = ("beta", "eta_q", "iterations", "converged", "intercept", "imputed_outcomes",
                "weights", "family", "feature_names")
        w = d.get("weights")
        return cls(np.asarray(d["beta"], float), d["eta_q"], d["iterations"], d["converged"],
                   np.asarray(d["imputed_outcomes"], float), d["intercept"],
                   None if w is None else np.asarray(w, float), d.get("family"),
                   tuple(d.get("feature_names", ())), {k: v for k, v in d.items() if k not in core})


def dantzig_aft(ds: SurvivalDataset, eta_q, weights=None, tol=1e-5, max_iter=50,
                beta0=None, family=None) -> DantzigFit:
    """Iterate imputation and the centred Dantzig program to a fixed point.

    ``imputed_outcomes`` are the outcomes the returned ``beta`` was solved
    from, so the constraint holds for them to LP accuracy.
    """
    ds.require_events()
    Xc = center(ds.X)
    beta = np.zeros(ds.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    converged = False
    it = 0
    tstar = None
    for it in range(1, max_iter + 1):
        tstar = buckley_james_impute(ds, beta)
        new = dantzig_linear(Xc, center(tstar), eta_q, weights)
        step = np.max(np.abs(new - beta), initial=0.0)
        beta = new
        if step <= tol or ds.event.all():
            converged = True
            break
    if not converged:
        warnings.warn("Buckley-James iteration did not converge; returning last iterate",
                      stacklevel=2)
    intercept = float(np.mean(tstar) - ds.X.mean(axis=0) @ beta)
    return DantzigFit(beta, float(eta_q), it, converged, tstar, intercept,
                      None if weights is None else np.asarray(weights, float), family,
                      ds.feature_names)


def eta_q_max(ds: SurvivalDataset) -> float:
    """Smallest ``eta_q`` at which the first Dantzig step returns zero."""
    Xc = center(ds.X)
    return float(np.max(np.abs(Xc.T @ center(buckley_james_impute(ds, np.zeros(ds.p))))))


def ridge_weights(ds: SurvivalDataset, lam=None) -> np.ndarray:
    """Adaptive weights ``1 / (|b_j| + 1/sqrt(n))`` from a ridge fit to ``T*(0)``.

    The ridge penalty defaults to the generalized cross-validation minimizer.
    """
    Xc = center(ds.X)
    y = center(buckley_james_impute(ds, np.zeros(ds.p)))
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    uty = U.T @ y
    if lam is None:
        grid = np.exp(np.linspace(np.log(1e-4), np.log(1e4), 81)) * max(s[0] ** 2, 1e-12)
        n = ds.n
        best = np.inf
        for lg in grid:
            f = s ** 2 / (s ** 2 + lg)
            rss = np.sum((y - U @ (f * uty)) ** 2)
            gcv = rss / (n * (1 - f.sum() / n) ** 2)
            if gcv < best:
                best, lam = gcv, lg
    b = Vt.T @ (s / (s ** 2 + lam) * uty)
    return 1.0 / (np.abs(b) + 1.0 / np.sqrt(ds.n))


@dataclass
class DantzigCV:
    etas: np.ndarray
    cv_errors: np.ndarray
    selected_eta: float
    fit: DantzigFit


def cross_validate_dantzig(ds: SurvivalDataset, etas=None, k=5, seed=0, n_etas=20,
                           eta_min_ratio=0.01, weights=None, threads=1) -> DantzigCV:
    """Choose ``eta_q`` by K-fold CV on imputed-outcome squared error.

    Held-out subjects are imputed with the residual KM of the full data at the
    training coefficients; the error is the mean of
    ``(T*_i - intercept - X_i'beta)^2`` over held-out ``i``.
    """
    if etas is None:
        top = eta_q_max(ds)
        etas = np.exp(np.linspace(np.log(top), np.log(top * eta_min_ratio), n_etas))
    etas = np.asarray(etas, dtype=float)
    labels = stratified_folds(ds.event, k, np.random.default_rng(seed))

    def fold_errors(f):
        train = ds.subset(labels != f)
        test = labels == f
        errs = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for eta in etas:
                fit = dantzig_aft(train, eta, weights)
                tstar = buckley_james_impute(ds, fit.beta)
                resid = tstar[test] - fit.predict_log_time(ds.X[test])
                errs.append(float(np.mean(resid ** 2)))
        return np.array(errs)

    errors = np.mean(map_ordered(fold_errors, range(k), threads), axis=0)
    best = float(etas[int(np.argmin(errors))])
    return DantzigCV(etas, errors, best, dantzig_aft(ds, best, weights))
