"""Semi-competing risks (illness-death) model with a shared gamma frailty.

Conditional on the frailty ``gamma ~ Gamma(1/theta, rate 1/theta)`` the
transition hazards are

    lambda_1(t)      = gamma * lambda_01(t) * exp(h_1(x))         healthy -> progression
    lambda_2(t)      = gamma * lambda_02(t) * exp(h_2(x))         healthy -> death
    lambda_3(t | t1) = gamma * lambda_03(t - t1) * exp(h_3(x))    progression -> death

with Weibull baselines ``lambda_0g(s) = phi_g1 phi_g2 s^(phi_g2 - 1)``. The
third transition runs on the sojourn clock ``t - t1``.

Integrating the frailty out with the gamma Laplace transform, a subject with
``m = d1 + d2`` observed transitions and total cumulative hazard ``A``
contributes

    prod(observed hazards at gamma = 1) * (1 + theta)^(d1 d2) * (1 + theta A)^-(1/theta + m)

to the likelihood. ``printed_form_neg_log_likelihood`` evaluates the variant
with ``theta`` and ``1/theta`` exchanged, kept as a diagnostic only.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._parallel import map_ordered, spawn_generators
from .mlp import Network, init_network
from .nonparam import StepFunction
from .survdata import DataError, DegenerateDataError, IllnessDeathDataset

TRANSITIONS = ("progression", "death without progression", "death after progression")
THETA_BOUNDARY = 1e-4

DEFAULT_GRID = tuple({"layers": L, "units": u, "lr": lr, "dropout": dr}
                     for L in (1, 2) for u in (8, 16, 32) for lr in (1e-2, 1e-3)
                     for dr in (0.0, 0.2))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ScrParameters:
    """Weibull scales/shapes ``phi`` (rows = transitions), frailty variance
    ``theta`` and three log-risk functions.

    Each entry of ``h`` is either a coefficient vector (``h_g(x) = x' b_g``)
    or a :class:`Network`, centred so that ``h_g(0) = 0``.
    """

    phi: np.ndarray
    theta: float
    h: list

    def __post_init__(self):
        self.phi = np.asarray(self.phi, float).reshape(3, 2)
        self.theta = float(self.theta)
        if not np.all(self.phi > 0) or not np.all(np.isfinite(self.phi)):
            raise ValueError("phi must be positive and finite")
        if not (self.theta > 0 and np.isfinite(self.theta)):
            raise ValueError("theta must be positive")
        if len(self.h) != 3:
            raise ValueError("need one log-risk function per transition")
        self.h = [h if isinstance(h, Network) else np.asarray(h, float).reshape(-1)
                  for h in self.h]

    @property
    def p(self):
        h = self.h[0]
        return h.input_dim if isinstance(h, Network) else h.size

    @property
    def mode(self):
        return "dnn" if isinstance(self.h[0], Network) else "linear"

    def log_risk(self, X):
        """``(n, 3)`` matrix of ``h_g(X_i)``."""
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.p:
            raise ValueError(f"covariates have {X.shape[1]} columns, model expects {self.p}")
        out = np.empty((X.shape[0], 3))
        for g, h in enumerate(self.h):
            if isinstance(h, Network):
                out[:, g] = h.forward(X)[:, 0] - h.forward(np.zeros(self.p))[0]
            else:
                out[:, g] = X @ h
        return out

    def to_dict(self):
        return {"phi": self.phi.tolist(), "theta": self.theta,
                "h": [h.to_dict() if isinstance(h, Network) else h.tolist() for h in self.h]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["phi"], d["theta"],
                   [Network.from_dict(h) if isinstance(h, dict) else h for h in d["h"]])


def baseline_hazard(phi_g, s):
    s = np.asarray(s, float)
    return phi_g[0] * phi_g[1] * s ** (phi_g[1] - 1.0)


def baseline_cumhaz(phi_g, s):
    return phi_g[0] * np.asarray(s, float) ** phi_g[1]


def transition_hazards(params: ScrParameters, t, t1=None, x=None, gamma_value=1.0):
    """``(lambda_1(t), lambda_2(t), lambda_3(t | t1))`` for one subject.

    Without ``t1`` the third hazard is evaluated at sojourn time ``t``.
    """
    t = float(t)
    if not t > 0:
        raise ValueError("t must be positive")
    s3 = t
    if t1 is not None:
        if not 0 < t1 < t:
            raise ValueError(f"progression time t1 = {t1} must satisfy 0 < t1 < t = {t}")
        s3 = t - t1
    x = np.zeros(params.p) if x is None else np.asarray(x, float)
    eh = np.exp(params.log_risk(x)[0])
    base = np.array([baseline_hazard(params.phi[0], t), baseline_hazard(params.phi[1], t),
                     baseline_hazard(params.phi[2], s3)])
    return gamma_value * base * eh


# ---------------------------------------------------------------------------
# likelihood


def _arrays(data):
    if isinstance(data, IllnessDeathDataset):
        return data.y1, data.d1.astype(float), data.y2, data.d2.astype(float), data.X
    data = list(data)
    if not data:
        raise DataError("no records")
    ds = IllnessDeathDataset.from_records(data)
    return ds.y1, ds.d1.astype(float), ds.y2, ds.d2.astype(float), ds.X


def _terms(phi, theta, eta, y1, d1, y2, d2, grad=False, printed=False):
    """Per-subject log-likelihood and (optionally) its derivatives with respect
    to ``eta`` (n x 3), ``log phi`` (3 x 2, summed) and ``log theta``."""
    s = np.column_stack([y1, y1, np.where(d1 > 0, y2 - y1, 0.0)])
    ev = np.column_stack([d1, (1 - d1) * d2, d1 * d2])
    m = d1 + d2
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)), 0.0)
        has_event = ev > 0
        bad_clock = has_event & (s <= 0)
        lam0 = phi[:, 0] * np.where(s > 0, np.exp(phi[:, 1] * logs), 0.0)
        Lam = lam0 * np.exp(eta)
        log_haz = np.log(phi[:, 0]) + np.log(phi[:, 1]) + (phi[:, 1] - 1.0) * logs + eta
        log_haz = np.where(bad_clock, -np.inf, log_haz)
    A = Lam.sum(axis=1)
    ev_part = np.sum(np.where(has_event, log_haz, 0.0), axis=1)
    if printed:
        # theta and 1/theta exchanged relative to the Laplace-transform result
        ll = ev_part + ev[:, 2] * np.log1p(1.0 / theta) - (theta + m) * np.log1p(A / theta)
        return ll, None
    ll = ev_part + ev[:, 2] * np.log1p(theta) - (1.0 / theta + m) * np.log1p(theta * A)
    if not grad:
        return ll, None
    w = 1.0 / theta + m
    q = 1.0 + theta * A
    dA = -w * theta / q
    d_eta = ev + dA[:, None] * Lam
    d_logphi1 = d_eta
    d_logphi2 = ev * (1.0 + phi[:, 1] * logs) + dA[:, None] * Lam * phi[:, 1] * logs
    d_theta = ev[:, 2] / (1.0 + theta) + np.log1p(theta * A) / theta ** 2 - w * A / q
    g = {"eta": d_eta,
         "log_phi": np.stack([d_logphi1.sum(axis=0), d_logphi2.sum(axis=0)], axis=1),
         "log_theta": float(np.sum(d_theta) * theta)}
    return ll, g


def _check_finite(ll):
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise DataError(f"record {int(bad[0])}: non-finite likelihood contribution")


def log_likelihood_terms(params: ScrParameters, data):
    y1, d1, y2, d2, X = _arrays(data)
    ll, _ = _terms(params.phi, params.theta, params.log_risk(X), y1, d1, y2, d2)
    _check_finite(ll)
    return ll


def marginal_neg_log_likelihood(params: ScrParameters, data) -> float:
    """Negative log of the frailty-integrated likelihood (sum over subjects)."""
    return float(-np.sum(log_likelihood_terms(params, data)))


def printed_form_neg_log_likelihood(params: ScrParameters, data) -> float:
    """Diagnostic: the variant with ``(1 + 1/theta)^(d1 d2)`` and exponent
    ``-(theta + d1 + d2)`` on ``1 + A/theta``. Equals the derived form at
    ``1/theta``; it does not reduce to the no-frailty likelihood as
    ``theta -> 0``."""
    y1, d1, y2, d2, X = _arrays(data)
    ll, _ = _terms(params.phi, params.theta, params.log_risk(X), y1, d1, y2, d2, printed=True)
    return float(-np.sum(ll))


def conditional_log_likelihood(params: ScrParameters, record, gamma_value):
    """Log-likelihood of one record given the frailty value (no integration)."""
    y1, d1, y2, d2 = record.y1, bool(record.d1), record.y2, bool(record.d2)
    x = np.asarray(record.covariates, float)
    eh = np.exp(params.log_risk(x)[0])
    A = (baseline_cumhaz(params.phi[0], y1) * eh[0] + baseline_cumhaz(params.phi[1], y1) * eh[1])
    out = 0.0
    if d1:
        A += baseline_cumhaz(params.phi[2], y2 - y1) * eh[2]
        out += np.log(transition_hazards(params, y1, x=x, gamma_value=gamma_value)[0])
        if d2:
            out += np.log(transition_hazards(params, y2, t1=y1, x=x, gamma_value=gamma_value)[2])
    elif d2:
        out += np.log(transition_hazards(params, y1, x=x, gamma_value=gamma_value)[1])
    return out - gamma_value * A


def neg_log_likelihood_grad(params: ScrParameters, data):
    """Value and gradient for linear log-risks, flattened as
    ``[log phi (row-major 3 x 2), log theta, b_1, b_2, b_3]``."""
    if params.mode != "linear":
        raise ValueError("analytic parameter gradients need linear log-risks")
    y1, d1, y2, d2, X = _arrays(data)
    eta = params.log_risk(X)
    ll, g = _terms(params.phi, params.theta, eta, y1, d1, y2, d2, grad=True)
    _check_finite(ll)
    grad = np.concatenate([g["log_phi"].ravel(), [g["log_theta"]], (X.T @ g["eta"]).T.ravel()])
    return float(-ll.sum()), -grad


def pack_linear(params: ScrParameters):
    return np.concatenate([np.log(params.phi).ravel(), [np.log(params.theta)],
                           np.concatenate(params.h)])


def unpack_linear(v, p):
    v = np.asarray(v, float)
    return ScrParameters(np.exp(v[:6]).reshape(3, 2), float(np.exp(v[6])),
                         [v[7 + g * p:7 + (g + 1) * p] for g in range(3)])


# ---------------------------------------------------------------------------
# fitting


@dataclass
class ScrFit:
    params: ScrParameters
    neg_log_lik: float
    converged: bool
    theta_ci: tuple | None = None
    hyperparams: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    feature_names: tuple = ()

    @property
    def mode(self):
        return self.params.mode

    def to_dict(self):
        return {"params": self.params.to_dict(), "neg_log_lik": self.neg_log_lik,
                "converged": self.converged,
                "theta_ci": None if self.theta_ci is None else list(self.theta_ci),
                "hyperparams": self.hyperparams, "loss_trace": list(self.loss_trace),
                "feature_names": list(self.feature_names)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        ci = d.get("theta_ci")
        return cls(ScrParameters.from_dict(d["params"]), d["neg_log_lik"], d["converged"],
                   None if ci is None else tuple(ci), d.get("hyperparams", {}),
                   list(d.get("loss_trace", [])), tuple(d.get("feature_names", ())))


def check_transitions(ds: IllnessDeathDataset):
    counts = [int(np.sum(ds.d1)), int(np.sum(~ds.d1 & ds.d2)), int(np.sum(ds.d1 & ds.d2))]
    for name, c in zip(TRANSITIONS, counts):
        if c == 0:
            raise DegenerateDataError(f"no observed '{name}' transitions: its baseline is not identifiable")
    return counts


def _start_phi(ds: IllnessDeathDataset):
    # exponential rates events / exposure per transition as a starting point
    exp12 = float(np.sum(ds.y1))
    exp3 = float(np.sum((ds.y2 - ds.y1)[ds.d1])) or 1.0
    rates = [np.sum(ds.d1) / exp12, np.sum(~ds.d1 & ds.d2) / exp12, np.sum(ds.d1 & ds.d2) / exp3]
    return np.column_stack([np.maximum(rates, 1e-8), np.ones(3)])


_LOG_THETA_BOUNDS = (np.log(1e-8), np.log(1e4))


def _fit_linear(ds: IllnessDeathDataset, max_iter=1000, tol=1e-10, start=None):
    n, p = ds.n, ds.p
    if start is None:
        start = ScrParameters(_start_phi(ds), 1.0, [np.zeros(p)] * 3)
    v0 = pack_linear(start)
    trace = []

    def fun(v):
        try:
            val, g = neg_log_likelihood_grad(unpack_linear(v, p), ds)
        except (DataError, ValueError, FloatingPointError):
            return np.inf, np.zeros_like(v)
        trace.append(val)
        return val / n, g / n

    bounds = [(-30.0, 30.0)] * 6 + [_LOG_THETA_BOUNDS] + [(None, None)] * (3 * p)
    with np.errstate(over="ignore", invalid="ignore"):
        res = minimize(fun, v0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-8})
    params = unpack_linear(res.x, p)
    return params, marginal_neg_log_likelihood(params, ds), bool(res.success), trace


def _centered_eta(nets, X, dropout, rng, p):
    outs, caches, zcaches = [], [], []
    zero = np.zeros((1, p))
    for net in nets:
        out, cache = net.forward(X, dropout=dropout, rng=rng, return_cache=True)
        z, zc = net.forward(zero, return_cache=True)
        outs.append(out[:, 0] - z[0, 0])
        caches.append(cache)
        zcaches.append(zc)
    return np.column_stack(outs), caches, zcaches


class _DnnProblem:
    """Flat parameter vector ``[log phi, log theta, net_1, net_2, net_3]``."""

    def __init__(self, nets, p):
        self.nets = nets
        self.p = p
        self.sizes = [net.n_params for net in nets]

    def pack(self, phi, theta):
        return np.concatenate([np.log(phi).ravel(), [np.log(theta)]]
                              + [net.get_flat() for net in self.nets])

    def unpack(self, v):
        k = 7
        for net, s in zip(self.nets, self.sizes):
            net.set_flat(v[k:k + s])
            k += s
        return np.exp(v[:6]).reshape(3, 2), float(np.exp(v[6]))

    def value_grad(self, v, ds, dropout=0.0, rng=None):
        phi, theta = self.unpack(v)
        eta, caches, zcaches = _centered_eta(self.nets, ds.X, dropout, rng, self.p)
        ll, g = _terms(phi, theta, eta, ds.y1, ds.d1.astype(float), ds.y2, ds.d2.astype(float),
                       grad=True)
        if not np.all(np.isfinite(ll)):
            return np.inf, None
        n = ds.n
        parts = [-g["log_phi"].ravel() / n, [-g["log_theta"] / n]]
        for k, net in enumerate(self.nets):
            up = -g["eta"][:, k:k + 1] / n
            grads, _ = net.backward(up, caches[k])
            zgrads, _ = net.backward(-up.sum(axis=0, keepdims=True), zcaches[k])
            parts.append(Network.flatten_grads(grads) + Network.flatten_grads(zgrads))
        return float(-ll.sum() / n), np.concatenate(parts)

    def value(self, v, ds):
        phi, theta = self.unpack(v)
        eta, _, _ = _centered_eta(self.nets, ds.X, 0.0, None, self.p)
        ll, _ = _terms(phi, theta, eta, ds.y1, ds.d1.astype(float), ds.y2, ds.d2.astype(float))
        return float(-ll.sum() / ds.n) if np.all(np.isfinite(ll)) else np.inf

    def params(self, v):
        phi, theta = self.unpack(v)
        nets = [net.copy() for net in self.nets]
        return ScrParameters(phi, theta, nets)


def _train_dnn(ds, hp, epochs, seed, start_phi, start_theta, valid=None, check_every=10):
    """Full-batch Adam on the per-subject mean negative log-likelihood.

    With ``valid`` the parameters at the best validation loss (checked every
    ``check_every`` epochs) are returned together with that epoch count.
    """
    rng = np.random.default_rng(seed)
    hidden = (int(hp["units"]),) * int(hp["layers"])
    nets = [init_network(ds.p, hidden, 1, "relu", rng) for _ in range(3)]
    prob = _DnnProblem(nets, ds.p)
    v = prob.pack(start_phi, start_theta)
    lr, dropout = float(hp["lr"]), float(hp.get("dropout", 0.0))
    b1, b2, eps = 0.9, 0.999, 1e-8
    m1 = np.zeros_like(v)
    m2 = np.zeros_like(v)
    trace = []
    best = (np.inf, v.copy(), 0)
    lo, hi = _LOG_THETA_BOUNDS
    for ep in range(1, epochs + 1):
        val, g = prob.value_grad(v, ds, dropout, rng if dropout else None)
        if g is None:
            break
        trace.append(val)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        v = v - lr * (m1 / (1 - b1 ** ep)) / (np.sqrt(m2 / (1 - b2 ** ep)) + eps)
        v[:6] = np.clip(v[:6], -30.0, 30.0)
        v[6] = np.clip(v[6], lo, hi)
        if valid is not None and (ep % check_every == 0 or ep == epochs):
            vl = prob.value(v, valid)
            if vl < best[0]:
                best = (vl, v.copy(), ep)
    if valid is not None and np.isfinite(best[0]):
        v = best[1]
    window = trace[-11:]
    converged = len(window) > 1 and abs(window[0] - window[-1]) <= 1e-4 * max(1.0, abs(window[-1]))
    params = prob.params(v)
    return params, trace, converged, (best[0], best[2]) if valid is not None else None


def _split(n, frac, rng):
    perm = rng.permutation(n)
    k = max(1, int(round(frac * n)))
    return np.sort(perm[k:]), np.sort(perm[:k])


def _fit_once(ds, mode, hp, epochs, seed, max_iter):
    if mode == "linear":
        params, nll, conv, trace = _fit_linear(ds, max_iter=max_iter)
        return params, nll, conv, trace
    lin, _, _, _ = _fit_linear(ds, max_iter=max_iter)
    params, trace, conv, _ = _train_dnn(ds, hp, epochs, seed, lin.phi, lin.theta)
    return params, marginal_neg_log_likelihood(params, ds), conv, trace


def fit_scr(data, mode="linear", grid=None, epochs=300, bootstrap_B=0, seed=0, threads=1,
            valid_frac=0.2, max_iter=1000, ci_level=0.95) -> ScrFit:
    """Maximum marginal likelihood fit.

    ``mode = "linear"`` optimizes ``(log phi, log theta, b_1..3)`` with L-BFGS-B
    and analytic gradients. ``mode = "dnn"`` uses three relu sub-networks,
    centred so ``h_g(0) = 0``, trained by full-batch Adam; with more than one
    grid point the hyperparameters (and the epoch count) are chosen by the
    validation marginal likelihood on a seeded split, then refit on all data.
    ``bootstrap_B > 0`` adds a percentile bootstrap interval for ``theta``
    with the hyperparameters held at the chosen point.
    """
    ds = data if isinstance(data, IllnessDeathDataset) else IllnessDeathDataset.from_records(list(data))
    if mode not in ("linear", "dnn"):
        raise ValueError(f"unknown mode {mode!r}")
    check_transitions(ds)
    rng = np.random.default_rng(seed)
    hp = {}
    if mode == "dnn":
        grid = [dict(g) for g in (grid or DEFAULT_GRID)]
        hp = dict(grid[0], epochs=int(epochs))
        if len(grid) > 1:
            tr_idx, va_idx = _split(ds.n, valid_frac, rng)
            tr, va = ds.subset(tr_idx), ds.subset(va_idx)
            check_transitions(tr)
            lin, _, _, _ = _fit_linear(tr, max_iter=max_iter)
            scores = []
            for k, g in enumerate(grid):
                _, _, _, (score, ep) = _train_dnn(tr, g, epochs, seed + k, lin.phi, lin.theta,
                                                  valid=va)
                scores.append((score, k, ep))
            score, k, ep = min(scores)
            hp = dict(grid[k], epochs=int(ep), validation_loss=float(score))
    params, nll, conv, trace = _fit_once(ds, mode, hp, hp.get("epochs", epochs), seed, max_iter)
    if params.theta < THETA_BOUNDARY:
        warnings.warn(f"theta estimate {params.theta:.3g} is at the boundary (< {THETA_BOUNDARY}); "
                      "the data show no frailty dependence", stacklevel=2)
    ci = None
    if bootstrap_B:
        ci = _bootstrap_theta(ds, mode, hp, hp.get("epochs", epochs), seed, bootstrap_B, threads,
                              max_iter, ci_level, params.theta)
    return ScrFit(params, nll, conv, ci, hp, list(trace), ds.feature_names)


def _bootstrap_theta(ds, mode, hp, epochs, seed, B, threads, max_iter, level, point):
    gens = spawn_generators([seed, 1], B)

    def one(k):
        g = gens[k]
        idx = g.integers(0, ds.n, size=ds.n)
        bs = ds.subset(idx)
        try:
            check_transitions(bs)
        except DegenerateDataError:
            return np.nan
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, _, _, _ = _fit_once(bs, mode, hp, epochs, int(g.integers(2 ** 31)), max_iter)
        return params.theta

    thetas = np.array(map_ordered(one, range(B), threads))
    thetas = thetas[np.isfinite(thetas)]
    if thetas.size < 2:
        warnings.warn("fewer than two usable bootstrap replicates; no theta interval", stacklevel=3)
        return None
    a = (1 - level) / 2
    lo, hi = np.quantile(thetas, [a, 1 - a])
    # keep the point estimate inside the reported interval
    return (float(min(lo, point)), float(max(hi, point)))


# ---------------------------------------------------------------------------
# prediction


def predict_transitions(fit, x, grid, n_points=200):
    """Frailty-marginalized state probabilities at the times in ``grid``.

    Returns a dict with ``pfs`` (no transition yet), ``cif_prog`` (progressed
    by t), ``cif_death`` (died without progression by t),
    ``death_after_prog`` (progressed and died by t) and ``os``. The first
    three sum to one. The competing integrals over the first transition time
    ``u`` are Stieltjes sums with respect to ``F(u) = 1 - pfs(u)`` on an
    ``n_points`` grid of ``[0, t]`` spaced quadratically from 0, with the
    integrand at interval midpoints; those sums telescope, so the total is exact up to round-off.
    """
    params = fit.params if isinstance(fit, ScrFit) else fit
    phi, theta = params.phi, params.theta
    eh = np.exp(params.log_risk(np.asarray(x, float).reshape(1, -1))[0])
    grid = np.asarray(grid, float).reshape(-1)
    if np.any(grid < 0):
        raise ValueError("grid times must be non-negative")

    def lam12(u):
        return baseline_cumhaz(phi[0], u) * eh[0] + baseline_cumhaz(phi[1], u) * eh[1]

    def surv(L):
        return np.exp(-np.log1p(theta * L) / theta)

    def pi1(u):
        a = np.log(phi[0, 0] * phi[0, 1]) + (phi[0, 1] - 1) * np.log(u) + np.log(eh[0])
        b = np.log(phi[1, 0] * phi[1, 1]) + (phi[1, 1] - 1) * np.log(u) + np.log(eh[1])
        return 1.0 / (1.0 + np.exp(b - a))

    out = {k: np.zeros(grid.size) for k in ("pfs", "cif_prog", "cif_death", "death_after_prog")}
    for k, t in enumerate(grid):
        if t == 0:
            out["pfs"][k] = 1.0
            continue
        # nodes cluster near 0, where the hazard ratio pi1 varies fastest
        u = t * np.linspace(0.0, 1.0, n_points) ** 2
        L = lam12(u)
        F = -np.expm1(-np.log1p(theta * L) / theta)
        dF = np.diff(F)
        mid = 0.5 * (u[1:] + u[:-1])
        p1 = pi1(mid)
        Lm = lam12(mid)
        L3 = baseline_cumhaz(phi[2], t - mid) * eh[2]
        # P(death by t | progression at mid, gamma integrated against the posterior at mid)
        ratio = np.exp(-(1.0 / theta + 1.0) * (np.log1p(theta * (Lm + L3)) - np.log1p(theta * Lm)))
        out["pfs"][k] = surv(L[-1])
        out["cif_prog"][k] = np.sum(p1 * dF)
        out["cif_death"][k] = np.sum((1.0 - p1) * dF)
        out["death_after_prog"][k] = np.sum(p1 * (1.0 - ratio) * dF)
    out["os"] = 1.0 - out["cif_death"] - out["death_after_prog"]
    out["t"] = grid
    return out


def write_prediction_csv(pred, path):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "pfs", "cif_prog", "cif_death"])
        for row in zip(pred["t"], pred["pfs"], pred["cif_prog"], pred["cif_death"]):
            w.writerow([repr(float(v)) for v in row])


def log_risk_sweep(fit, X, column, values):
    """``h_g`` along one covariate, the others fixed at their sample means
    (binary columns at their modes). Returns a ``(len(values), 3)`` array."""
    params = fit.params if isinstance(fit, ScrFit) else fit
    X = np.asarray(X, float)
    ref = X.mean(axis=0)
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.all(np.isin(col, (0.0, 1.0))):
            ref[j] = float(np.mean(col) >= 0.5)
    Z = np.tile(ref, (len(values), 1))
    Z[:, column] = values
    return params.log_risk(Z)


# ---------------------------------------------------------------------------
# competing-risks CIF relation


@dataclass
class CifModel:
    """``F_c(t | x) = 1 - (1 - F_0c(t))^exp(x' beta_c)`` per cause ``c``."""

    baseline_cif: list
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, float)
        for f in self.baseline_cif:
            v = np.concatenate([[f.left_value], f.values])
            if np.any(np.diff(v) < 0) or v.min() < 0 or v.max() >= 1:
                raise ValueError("baseline CIF must be non-decreasing within [0, 1)")

    def coef(self, cause):
        return self.beta if self.beta.ndim == 1 else self.beta[cause]

    def to_dict(self):
        return {"baseline_cif": [f.to_dict() for f in self.baseline_cif],
                "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls([StepFunction.from_dict(f) for f in d["baseline_cif"]], d["beta"])


def cif_predict(model: CifModel, x, t, cause=0):
    F0 = np.asarray(model.baseline_cif[cause](t), float)
    r = np.exp(float(np.asarray(x, float) @ model.coef(cause)))
    out = 1.0 - (1.0 - F0) ** r
    return float(out) if out.ndim == 0 else out
