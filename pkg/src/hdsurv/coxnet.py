"""Penalized Cox regression: ``min_beta  l(beta) + eta * Pen(beta)``.

One accelerated proximal-gradient solver serves every penalty with a proximal
map; SCAD is handled by local linear approximation (a short sequence of
reweighted lasso problems).
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_ordered
from .coxcore import CoxFit, CoxRiskSets
from .penalties import (PenaltySpec, UnsupportedOperation, penalty_term, prox,
                        scad_derivative, scad_value)
from .survdata import DegenerateDataError, SurvivalDataset

SPARSE_KINDS = ("lasso", "elastic_net", "adaptive_lasso", "scad", "group_lasso",
                "kernel_elastic_net")


@dataclass
class SolverResult:
    beta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def prox_gradient(loss, loss_grad, spec, beta0, tol=1e-9, max_iter=20_000, L0=1.0,
                  keep_trace=False) -> SolverResult:
    """Monotone FISTA with backtracking and function-value restart.

    ``loss(beta)`` and ``loss_grad(beta) -> (value, gradient)`` define the
    smooth part. The accepted iterates have non-increasing objective; when an
    accelerated step would increase it, momentum is reset and a plain
    proximal-gradient step is taken from the incumbent instead.
    Converges when ``max |beta_{k+1} - beta_k| <= tol``.
    """
    x = np.asarray(beta0, dtype=float).copy()
    fx = loss(x)
    Fx = fx + penalty_term(spec, x)
    y = x.copy()
    t = 1.0
    L = L0
    trace = [Fx] if keep_trace else []
    converged = False
    it = 0
    restarted = False
    while it < max_iter:
        fy, gy = loss_grad(y)
        if not (np.isfinite(fy) and np.all(np.isfinite(gy))):
            if restarted:
                break
            # extrapolated point left the finite region: restart from the incumbent
            y, t, restarted = x.copy(), 1.0, True
            continue
        while True:
            z = prox(spec, y - gy / L, 1.0 / L)
            d = z - y
            fz = loss(z)
            if fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * max(1.0, abs(fy)):
                break
            L *= 2.0
            if L > 1e300:
                break
        Fz = fz + penalty_term(spec, z)
        if Fz > Fx and not restarted:
            y = x.copy()
            t = 1.0
            restarted = True
            continue
        restarted = False
        it += 1
        if Fz > Fx:
            # plain step from the incumbent did not improve: at a stationary point
            z, Fz = x, Fx
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        step = np.max(np.abs(z - x), initial=0.0)
        y = z + ((t - 1.0) / t_new) * (z - x)
        x, Fx, t = z, Fz, t_new
        if keep_trace:
            trace.append(Fx)
        if step <= tol:
            converged = True
            break
    return SolverResult(x, float(Fx), it, converged, trace)


def _cox_oracles(ds):
    rs = CoxRiskSets(ds.time, ds.event)
    X = ds.X

    def loss(b):
        return rs.loss(X @ b)

    def loss_grad(b):
        v, g = rs.loss_grad(X @ b)
        return v, X.T @ g

    return rs, loss, loss_grad


def eta_max(ds: SurvivalDataset, spec: PenaltySpec) -> float:
    """Smallest eta at which the sparse penalties give beta = 0 (KKT at zero)."""
    _, _, loss_grad = _cox_oracles(ds)
    g = np.abs(loss_grad(np.zeros(ds.p))[1])
    return _eta_max_from_grad(g, spec)


def _eta_max_from_grad(g, spec):
    k = spec.kind
    if k == "adaptive_lasso":
        w = spec.weights
        with np.errstate(divide="ignore"):
            r = np.where(w > 0, g / w, np.where(g > 0, np.inf, 0.0))
        return float(np.max(r))
    if k in ("elastic_net", "kernel_elastic_net") and spec.alpha > 0:
        return float(np.max(g) / spec.alpha)
    if k == "group_lasso":
        return float(max(np.linalg.norm(g[list(gr)]) for gr in spec.groups))
    return float(np.max(g))


def fit_penalized(ds: SurvivalDataset, spec: PenaltySpec, beta0=None, tol=1e-9,
                  max_iter=20_000, lla_max=20, keep_trace=False) -> CoxFit:
    """Minimize the penalized negative log partial likelihood.

    Fused lasso has no proximal map here and is rejected.
    """
    if spec.kind == "fused_lasso":
        raise UnsupportedOperation("fused_lasso is value-only; no solver support")
    ds.require_events()
    if not ds.standardized:
        sd = ds.X.std(axis=0)
        if np.any(np.abs(ds.X.mean(axis=0)) > 1e-6) or np.any(np.abs(sd - 1) > 1e-6):
            warnings.warn("covariates are not standardized; penalties act on raw scales",
                          stacklevel=2)
    rs, loss, loss_grad = _cox_oracles(ds)
    b0 = np.zeros(ds.p) if beta0 is None else np.asarray(beta0, dtype=float)
    if spec.kind == "scad":
        res, lla_steps = _fit_scad_lla(loss, loss_grad, spec, b0, tol, max_iter, lla_max,
                                       keep_trace, ds.n)
    else:
        res = prox_gradient(loss, loss_grad, spec, b0, tol, max_iter, keep_trace=keep_trace)
        lla_steps = 0
    g = loss_grad(res.beta)[1]
    extra = {"penalty": spec.to_dict(), "objective": res.objective}
    if spec.kind == "scad":
        extra["lla_steps"] = lla_steps
        extra["scad_knot"] = spec.eta / ds.n
    fit = CoxFit(beta=res.beta, neg_log_pl=loss(res.beta),
                 score_norm=float(np.max(np.abs(g), initial=0.0)), iterations=res.iterations,
                 converged=res.converged, baseline_chf=rs.breslow(ds.X @ res.beta),
                 feature_names=ds.feature_names, extra=extra)
    fit.trace = res.trace
    return fit


def scad_objective_term(spec, beta, n):
    """SCAD contribution ``n * sum_j p_lam(|beta_j|)`` with ``lam = eta / n``.

    The partial likelihood is a sum over subjects, so the SCAD knots are
    placed at the per-subject level ``eta / n``; near zero the slope is
    ``eta``, the same as a lasso with the same ``eta``.
    """
    return n * float(np.sum(scad_value(spec.eta / n, spec.alpha, beta)))


def _fit_scad_lla(loss, loss_grad, spec, b0, tol, max_iter, lla_max, keep_trace, n):
    lam = spec.eta / n
    beta = b0.copy()
    trace = []
    res = None
    for step in range(1, lla_max + 1):
        w = scad_derivative(lam, spec.alpha, np.abs(beta)) / lam
        sub = PenaltySpec("adaptive_lasso", spec.eta, weights=w)
        res = prox_gradient(loss, loss_grad, sub, beta, tol, max_iter, keep_trace=keep_trace)
        trace.extend(res.trace)
        done = np.max(np.abs(res.beta - beta), initial=0.0) <= tol and step > 1
        beta = res.beta
        if done:
            break
    obj = loss(beta) + scad_objective_term(spec, beta, n)
    return SolverResult(beta, float(obj), res.iterations, res.converged, trace), step


# ---------------------------------------------------------------------------
# paths and cross-validation


@dataclass
class PathFit:
    etas: np.ndarray
    betas: np.ndarray
    dfs: np.ndarray
    spec: PenaltySpec
    cv_scores: np.ndarray | None = None
    selected_eta: float | None = None
    objectives: np.ndarray | None = None
    feature_names: tuple = ()
    converged: np.ndarray | None = None

    @property
    def selected_beta(self):
        if self.selected_eta is None:
            raise ValueError("no eta selected (run cross_validate)")
        return self.betas[int(np.flatnonzero(self.etas == self.selected_eta)[0])]

    def to_dict(self):
        d = {
            "etas": self.etas.tolist(),
            "betas": self.betas.tolist(),
            "dfs": self.dfs.tolist(),
            "penalty": self.spec.to_dict(),
            "feature_names": list(self.feature_names),
            "cv_scores": None if self.cv_scores is None else self.cv_scores.tolist(),
            "selected_eta": self.selected_eta,
        }
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["etas"], float), np.asarray(d["betas"], float),
                   np.asarray(d["dfs"], int), PenaltySpec.from_dict(d["penalty"]),
                   None if d.get("cv_scores") is None else np.asarray(d["cv_scores"], float),
                   d.get("selected_eta"), feature_names=tuple(d.get("feature_names", ())))

    def write_tidy_csv(self, path):
        names = self.feature_names or tuple(f"x{j + 1}" for j in range(self.betas.shape[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eta", "j", "feature", "beta_j"])
            for eta, row in zip(self.etas, self.betas):
                for j, b in enumerate(row):
                    w.writerow([repr(float(eta)), j, names[j], repr(float(b))])


def eta_grid(ds, spec, n_etas=100, eta_min_ratio=0.01):
    top = eta_max(ds, spec)
    if not np.isfinite(top) or top <= 0:
        top = 1.0
    return np.exp(np.linspace(np.log(top), np.log(top * eta_min_ratio), n_etas))


def fit_path(ds: SurvivalDataset, spec: PenaltySpec, n_etas=100, eta_min_ratio=0.01,
             etas=None, tol=1e-9, max_iter=20_000) -> PathFit:
    """Warm-started fits over a decreasing log-spaced eta grid starting at eta_max."""
    if spec.kind == "fused_lasso":
        raise UnsupportedOperation("fused_lasso is value-only; no solver support")
    etas = eta_grid(ds, spec, n_etas, eta_min_ratio) if etas is None else np.asarray(etas, float)
    if np.any(np.diff(etas) >= 0):
        raise ValueError("etas must be strictly decreasing")
    beta = np.zeros(ds.p)
    betas, objs, conv = [], [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for eta in etas:
            fit = fit_penalized(ds, spec.with_eta(eta), beta0=beta, tol=tol, max_iter=max_iter)
            beta = fit.beta
            betas.append(beta)
            objs.append(fit.extra["objective"])
            conv.append(fit.converged)
    betas = np.array(betas)
    return PathFit(etas=etas, betas=betas, dfs=(betas != 0).sum(axis=1), spec=spec,
                   objectives=np.array(objs), feature_names=ds.feature_names,
                   converged=np.array(conv))


def stratified_folds(event, k, rng):
    """Fold labels with events and censorings dealt round-robin after shuffling."""
    event = np.asarray(event, dtype=bool)
    labels = np.empty(event.size, dtype=int)
    offset = 0
    for mask in (event, ~event):
        idx = np.flatnonzero(mask)
        idx = idx[rng.permutation(idx.size)]
        labels[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return labels


def cross_validate(ds: SurvivalDataset, spec: PenaltySpec, k=10, seed=0, n_etas=100,
                   eta_min_ratio=0.01, etas=None, threads=1, tol=1e-9) -> PathFit:
    """K-fold CV of the eta path by cross-validated partial likelihood.

    The score for fold ``f`` is ``l_full(beta_{-f}) - l_{-f}(beta_{-f})`` on the
    negative-log scale; ``cv_scores`` holds twice the sum over folds
    (a deviance) and ``selected_eta`` its minimizer.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > ds.n:
        raise ValueError("more folds than subjects")
    rng = np.random.default_rng(seed)
    labels = stratified_folds(ds.event, k, rng)
    for _ in range(10):
        if all(ds.event[labels != f].any() for f in range(k)):
            break
        labels = stratified_folds(ds.event, k, rng)
    if not all(ds.event[labels == f].any() for f in range(k)):
        warnings.warn("some CV folds contain no events", stacklevel=2)
    full = fit_path(ds, spec, n_etas, eta_min_ratio, etas=etas, tol=tol)
    etas = full.etas
    rs_full = CoxRiskSets(ds.time, ds.event)

    def fold_score(f):
        train = ds.subset(labels != f)
        path = fit_path(train, spec, etas=etas, tol=tol)
        rs_tr = CoxRiskSets(train.time, train.event)
        return np.array([rs_full.loss(ds.X @ b) - rs_tr.loss(train.X @ b) for b in path.betas])

    scores = 2.0 * np.sum(map_ordered(fold_score, range(k), threads), axis=0)
    full.cv_scores = scores
    full.selected_eta = float(etas[int(np.argmin(scores))])
    return full


def adaptive_weights(ds: SurvivalDataset, k=5, seed=0, n_etas=30, floor=1e-8):
    """Adaptive-lasso weights ``1 / |beta_ridge|`` with the ridge eta chosen by CV."""
    cv = cross_validate(ds, PenaltySpec("ridge", 1.0), k=k, seed=seed, n_etas=n_etas,
                        eta_min_ratio=1e-3)
    return 1.0 / np.maximum(np.abs(cv.selected_beta), floor)


def kkt_violation(ds: SurvivalDataset, beta, eta) -> float:
    """Largest violation of the lasso stationarity conditions at ``beta``."""
    _, _, loss_grad = _cox_oracles(ds)
    g = loss_grad(np.asarray(beta, float))[1]
    nz = beta != 0
    v_nz = np.abs(g[nz] + eta * np.sign(beta[nz]))
    v_z = np.maximum(np.abs(g[~nz]) - eta, 0.0)
    return float(max(np.max(v_nz, initial=0.0), np.max(v_z, initial=0.0)))
