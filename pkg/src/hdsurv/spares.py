"""Split-select-refit inference (SPARES) and its quantile version (Fused-HDCQR).

Each resample splits the subjects into two halves: a selector picks a
candidate set ``S`` on one half, and on the other half every coefficient
``j`` is estimated from the low-dimensional fit on ``S u {j}`` (the partial
regression estimator). Estimates are averaged over resamples and the
standard errors come from the covariance, across resamples, between each
subject's refit-half indicator and the estimates.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import norm

from ._parallel import map_ordered, spawn_generators
from .coxcore import fit_mple
from .coxnet import cross_validate, fit_penalized, prox_gradient
from .cqr import QuantileGrid, fit_cqr
from .penalties import PenaltySpec
from .screening import concordance_screen, default_d, marginal_cox_screen, top_d
from .survdata import DataError, DegenerateDataError, SurvivalDataset

Z975 = norm.ppf(0.975)


class RankDeficiencyError(DataError):
    pass


class ResampleError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearData:
    """Uncensored regression data ``(X, y)`` for the linear family."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError(f"inconsistent shapes: X {X.shape}, y {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("non-finite values in X or y")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, idx):
        return LinearData(self.X[idx], self.y[idx], self.feature_names)


@dataclass(frozen=True)
class Family:
    """Refit family: ``linear`` (OLS), ``cox`` (partial likelihood MPLE) or
    ``cqr`` (censored quantile regression at the levels of ``grid``)."""

    kind: str
    grid: QuantileGrid | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "cox", "cqr"):
            raise ValueError(f"unknown family {self.kind!r}")
        if self.kind == "cqr" and self.grid is None:
            object.__setattr__(self, "grid", QuantileGrid.default())

    @property
    def n_levels(self):
        return self.grid.taus.size if self.kind == "cqr" else 1

    @classmethod
    def coerce(cls, f):
        if isinstance(f, Family):
            return f
        if isinstance(f, str):
            return cls(f)
        kind, taus = f
        return cls(kind, taus if isinstance(taus, QuantileGrid) else QuantileGrid(np.atleast_1d(taus)))


# ---------------------------------------------------------------- partial regression

def _check_rank(M, names):
    """Raise naming the columns of ``M`` that are linear combinations of the others."""
    if M.shape[1] > M.shape[0]:
        raise RankDeficiencyError(f"{M.shape[1]} columns but only {M.shape[0]} rows")
    _, R, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(M.shape) * np.finfo(float).eps * 1e3 * (d[0] if d.size else 0.0)
    rank = int(np.sum(d > tol))
    if rank < M.shape[1]:
        bad = sorted(names[k] for k in piv[rank:])
        raise RankDeficiencyError(f"design is rank deficient; collinear columns: {', '.join(bad)}")


def _outcome(data):
    if isinstance(data, LinearData):
        return data.y
    if not data.event.all():
        raise DataError("linear family needs uncensored outcomes")
    return np.log(data.time)


def _linear_all(data, S):
    """OLS partial-regression coefficients for every ``j`` at once.

    For ``j`` outside ``S`` the coefficient is obtained by partialling ``[1, X_S]``
    out of both ``y`` and ``X_j`` (Frisch-Waugh-Lovell); for ``j`` in ``S`` it is
    the joint fit on ``[1, X_S]``.
    """
    X, y = data.X, _outcome(data)
    n = y.size
    names = ("(intercept)",) + tuple(data.feature_names[k] for k in S)
    base = np.column_stack([np.ones(n), X[:, S]])
    _check_rank(base, names)
    Q, _ = np.linalg.qr(base)
    ry = y - Q @ (Q.T @ y)
    RX = X - Q @ (Q.T @ X)
    ss = np.einsum("ij,ij->j", RX, RX)
    Xc = X - X.mean(axis=0)
    scale = np.einsum("ij,ij->j", Xc, Xc)
    out = np.empty(data.p)
    mask = np.ones(data.p, bool)
    mask[S] = False
    bad = mask & (ss <= 1e-10 * np.maximum(scale, 1e-300))
    if bad.any():
        cols = ", ".join(data.feature_names[k] for k in np.flatnonzero(bad)[:10])
        raise RankDeficiencyError(f"columns collinear with the selected set: {cols}")
    out[mask] = (RX[:, mask].T @ ry) / ss[mask]
    if len(S):
        out[S] = np.linalg.lstsq(base, y, rcond=None)[0][1:]
    return out[None, :]


def _fit_cols(data, cols, family):
    """``(levels, len(cols))`` coefficients of the low-dimensional fit on ``cols``."""
    sub = data.select_columns(cols)
    _check_rank(np.column_stack([np.ones(data.n), sub.X]), ("(intercept)",) + sub.feature_names)
    if family.kind == "cox":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_mple(sub)
        if not fit.converged:
            raise ResampleError("Cox partial regression did not converge")
        return fit.beta[None, :]
    fit = fit_cqr(sub, family.grid)
    vals = fit.coefficients[:, 1:].copy()
    vals[~fit.estimable] = np.nan
    return vals


def _generic_all(data, S, family):
    """Loop over ``j`` for the Cox and CQR families; rows are levels, columns ``j``."""
    out = np.empty((family.n_levels, data.p))
    mask = np.ones(data.p, bool)
    if S:
        out[:, S] = _fit_cols(data, S, family)
        mask[S] = False
    for j in np.flatnonzero(mask):
        out[:, j] = _fit_cols(data, S + [int(j)], family)[:, -1]
    return out


def partial_regression(data, selected, j, family="linear"):
    """Coefficient of covariate ``j`` in the fit on columns ``selected u {j}``.

    Returns a float for the linear and Cox families and the vector over the
    grid levels for the CQR family (NaN where a level is not estimable).
    """
    family = Family.coerce(family)
    S = sorted(set(int(k) for k in selected))
    j = int(j)
    if not 0 <= j < data.p:
        raise IndexError(f"covariate index {j} out of range")
    if len(set(S) | {j}) + 1 > data.n:
        raise RankDeficiencyError("selected set too large for the number of rows")
    if family.kind == "linear":
        return float(_linear_all(data, S)[0, j])
    cols = S if j in S else S + [j]
    vals = _fit_cols(data, cols, family)[:, cols.index(j)]
    return float(vals[0]) if family.kind == "cox" else vals


def _partial_all(data, S, family):
    if family.kind == "linear":
        return _linear_all(data, S)
    return _generic_all(data, S, family)


# ---------------------------------------------------------------- selectors

def lasso_ls(X, y, eta, beta0=None, tol=1e-7, max_iter=5000):
    """``min 0.5 ||y - X b||^2 + eta ||b||_1`` by the shared proximal-gradient solver."""
    spec = PenaltySpec("lasso", eta)
    b0 = np.zeros(X.shape[1]) if beta0 is None else beta0

    def loss(b):
        r = y - X @ b
        return 0.5 * (r @ r)

    def loss_grad(b):
        r = y - X @ b
        return 0.5 * (r @ r), -(X.T @ r)

    L0 = np.linalg.norm(X, 2) ** 2
    return prox_gradient(loss, loss_grad, spec, b0, tol=tol, max_iter=max_iter, L0=max(L0, 1e-12))


def _ls_standardize(X, y):
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - X.mean(axis=0)) / sd, y - y.mean()


def lasso_ls_path(X, y, etas, tol=1e-7):
    betas = []
    b = np.zeros(X.shape[1])
    for eta in etas:
        b = lasso_ls(X, y, eta, b, tol).beta
        betas.append(b)
    return np.array(betas)


def lasso_ls_cv(X, y, k=5, n_etas=30, eta_min_ratio=0.01, rng=None):
    """Eta minimizing K-fold prediction error over a log grid from ``||X'y||_inf``."""
    Xs, yc = _ls_standardize(X, y)
    top = np.abs(Xs.T @ yc).max()
    etas = np.exp(np.linspace(np.log(top), np.log(top * eta_min_ratio), n_etas))
    rng = np.random.default_rng(0) if rng is None else rng
    labels = rng.permutation(np.arange(y.size) % k)
    err = np.zeros(n_etas)
    for f in range(k):
        tr, te = labels != f, labels == f
        Xt, yt = _ls_standardize(X[tr], y[tr])
        sd = X[tr].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        # eta is on the sum scale: rescale to the training-fold size
        path = lasso_ls_path(Xt, yt, etas * tr.sum() / y.size)
        pred = y[tr].mean() + ((X[te] - X[tr].mean(axis=0)) / sd) @ path.T
        err += np.sum((y[te, None] - pred) ** 2, axis=0)
    return float(etas[int(np.argmin(err))])


@dataclass
class LassoSelector:
    """Lasso selector: least squares for :class:`LinearData`, partial likelihood
    for survival data. ``eta`` fixed, or chosen by K-fold CV on each half when
    ``None``. A fixed ``eta`` is on the per-subject scale and is multiplied by
    the half size."""

    eta: float | None = None
    k: int = 5
    n_etas: int = 30

    def __call__(self, data, rng):
        if isinstance(data, LinearData):
            Xs, yc = _ls_standardize(data.X, data.y)
            eta = (self.eta * data.n if self.eta is not None
                   else lasso_ls_cv(data.X, data.y, self.k, self.n_etas, rng=rng))
            return np.flatnonzero(lasso_ls(Xs, yc, eta).beta)
        from .survdata import standardize
        sds = standardize(data)
        spec = PenaltySpec("lasso", 1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if self.eta is None:
                cv = cross_validate(sds, spec, k=self.k, seed=int(rng.integers(2**31)),
                                    n_etas=self.n_etas, tol=1e-6)
                beta = cv.selected_beta
            else:
                beta = fit_penalized(sds, spec.with_eta(self.eta * data.n), tol=1e-6).beta
        return np.flatnonzero(beta)


@dataclass
class ScreeningSelector:
    """Top-``d`` marginal screening: absolute correlation for :class:`LinearData`,
    marginal Cox or concordance scores for survival data."""

    d: int | None = None
    method: str = "cox"

    def __call__(self, data, rng):
        d = default_d(data.n, data.p) if self.d is None else min(self.d, data.p)
        if isinstance(data, LinearData):
            Xc = data.X - data.X.mean(axis=0)
            yc = data.y - data.y.mean()
            den = np.sqrt(np.einsum("ij,ij->j", Xc, Xc) * (yc @ yc))
            score = np.abs(Xc.T @ yc) / np.where(den > 0, den, np.inf)
            return top_d(score, d)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            screen = marginal_cox_screen if self.method == "cox" else concordance_screen
            return screen(data, d=d).kept


@dataclass
class FixedSelector:
    """Always returns the same index set (e.g. the true support)."""

    indices: tuple

    def __call__(self, data, rng):
        return np.asarray(self.indices, dtype=int)


def default_selector(data):
    return LassoSelector()


# ---------------------------------------------------------------- inference

@dataclass
class ResampleInference:
    estimates: np.ndarray
    ses: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    B: int
    inclusion: np.ndarray
    per_resample: np.ndarray
    degenerate_se: np.ndarray = None
    skipped: int = 0
    feature_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"estimates": self.estimates.tolist(), "ses": self.ses.tolist(),
                "ci_lower": self.ci_lower.tolist(), "ci_upper": self.ci_upper.tolist(),
                "p_values": self.p_values.tolist(), "B": self.B, "skipped": self.skipped,
                "degenerate_se": self.degenerate_se.tolist(),
                "feature_names": list(self.feature_names),
                "inclusion": self.inclusion.astype(int).tolist(),
                "per_resample": self.per_resample.tolist(), **self.extra}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        extra = {k: v for k, v in d.items() if k not in {
            "estimates", "ses", "ci_lower", "ci_upper", "p_values", "B", "skipped",
            "degenerate_se", "feature_names", "inclusion", "per_resample"}}
        return cls(np.asarray(d["estimates"], float), np.asarray(d["ses"], float),
                   np.asarray(d["ci_lower"], float), np.asarray(d["ci_upper"], float),
                   np.asarray(d["p_values"], float), int(d["B"]),
                   np.asarray(d["inclusion"], bool), np.asarray(d["per_resample"], float),
                   np.asarray(d["degenerate_se"], bool), int(d["skipped"]),
                   tuple(d["feature_names"]), extra)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "feature", "estimate", "se", "ci_lower", "ci_upper", "p"])
            for j in range(self.estimates.size):
                name = self.feature_names[j] if self.feature_names else f"x{j + 1}"
                w.writerow([j, name, repr(float(self.estimates[j])), repr(float(self.ses[j])),
                            repr(float(self.ci_lower[j])), repr(float(self.ci_upper[j])),
                            repr(float(self.p_values[j]))])


def delta_method_se(inclusion, per_resample, bias_correction=False, split_correction=False):
    """``se_j = [sum_i cov_ij^2]^(1/2)`` with ``cov_ij`` the sample covariance
    (denominator ``B - 1``) over resamples of ``I_bi`` and ``beta_j^b``.

    ``bias_correction`` subtracts the Monte-Carlo inflation
    ``sum_i var(I_i) var(beta_j) / B`` of the summed squared covariances.
    ``split_correction`` multiplies the variance by ``n (n - 1) / (n - m)^2``,
    the infinitesimal-jackknife factor for subsamples of size ``m`` drawn
    without replacement.
    """
    I = np.asarray(inclusion, dtype=float)
    T = np.asarray(per_resample, dtype=float)
    B, n = I.shape
    Ic = I - I.mean(axis=0)
    Tc = T - T.mean(axis=0)
    C = Ic.T @ Tc / (B - 1)
    var = np.einsum("ij,ij->j", C, C)
    if bias_correction:
        v_I = np.einsum("bi,bi->i", Ic, Ic).sum() / (B - 1)
        v_T = np.einsum("bj,bj->j", Tc, Tc) / (B - 1)
        var = np.maximum(var - v_I * v_T / B, 0.0)
    if split_correction:
        m = I.sum(axis=1).mean()
        var = var * n * (n - 1) / (n - m) ** 2
    return np.sqrt(var)


def _inference(inclusion, per_resample, skipped, names, bias_correction, split_correction):
    est = per_resample.mean(axis=0)
    se = delta_method_se(inclusion, per_resample, bias_correction, split_correction)
    # identical refits up to round-off count as zero spread
    degenerate = se <= 1e-12 * np.maximum(1.0, np.abs(est))
    se = np.where(degenerate, 0.0, se)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(est) / se
    pv = 2.0 * norm.sf(z)
    pv = np.where(degenerate, np.where(est != 0, 0.0, 1.0), pv)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} coefficients have zero standard error",
                      stacklevel=3)
    return ResampleInference(est, se, est - Z975 * se, est + Z975 * se, pv,
                             per_resample.shape[0], inclusion, per_resample, degenerate,
                             skipped, names)


def _run_resamples(data, selector, family, B, seed, threads):
    """Rows of the inclusion matrix and ``(levels, p)`` estimates; ``None`` if skipped."""
    if B < 2:
        raise ValueError("B must be at least 2")
    n = data.n
    n1 = n // 2
    limit = n // 2 - 2
    rngs = spawn_generators(seed, B)

    def one(b):
        rng = rngs[b]
        perm = rng.permutation(n)
        refit, select = np.sort(perm[:n1]), np.sort(perm[n1:])
        row = np.zeros(n, bool)
        row[refit] = True
        S = np.unique(np.asarray(selector(data.subset(select), rng), dtype=int))
        if S.size > limit:
            return row, None, f"selector returned {S.size} > {limit} variables"
        try:
            est = _partial_all(data.subset(refit), list(S), family)
        except (RankDeficiencyError, ResampleError, DegenerateDataError, np.linalg.LinAlgError) as exc:
            return row, None, str(exc)
        return row, est, None

    return map_ordered(one, range(B), threads)


def _assemble(results, level, names, bias_correction, split_correction):
    rows, ests = [], []
    skipped = 0
    for row, est, _ in results:
        if est is None or not np.all(np.isfinite(est[level])):
            skipped += 1
            continue
        rows.append(row)
        ests.append(est[level])
    if len(ests) < 2:
        raise ResampleError("fewer than two usable resamples")
    return _inference(np.array(rows), np.array(ests), skipped, names,
                      bias_correction, split_correction)


def _warn_skips(results):
    msgs = [m for _, est, m in results if est is None]
    if msgs:
        warnings.warn(f"{len(msgs)} resamples skipped (first: {msgs[0]})", stacklevel=3)


def spares_fit(data, selector=None, family="linear", B=100, seed=0, threads=1,
               bias_correction=False, split_correction=False) -> ResampleInference:
    """SPARES estimates, standard errors, 95% intervals and two-sided p-values.

    ``data`` is :class:`LinearData` (or uncensored survival data) for the
    linear family and a :class:`SurvivalDataset` for ``cox``/``cqr``.
    ``selector(half, rng)`` returns column indices. For the CQR family the
    inference refers to the last level of the family's grid.
    """
    family = Family.coerce(family)
    selector = default_selector(data) if selector is None else selector
    results = _run_resamples(data, selector, family, B, seed, threads)
    _warn_skips(results)
    return _assemble(results, family.n_levels - 1, data.feature_names,
                     bias_correction, split_correction)


@dataclass
class FusedHdcqrResult:
    grid: QuantileGrid
    inferences: list
    skipped: np.ndarray

    @property
    def coefficients(self):
        """``(levels, p)`` aggregated coefficients."""
        return np.array([inf.estimates for inf in self.inferences])

    def coef(self, tau):
        """``beta(tau) = beta(tau_k)`` for ``tau_{k-1} <= tau < tau_k``."""
        taus = self.grid.taus
        if not 0 <= tau < taus[-1]:
            raise ValueError(f"tau must lie in [0, {taus[-1]})")
        return self.inferences[int(np.searchsorted(taus, tau, side="right"))].estimates

    def to_dict(self):
        return {"taus": self.grid.taus.tolist(), "skipped": self.skipped.tolist(),
                "levels": [inf.to_dict() for inf in self.inferences]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(QuantileGrid(d["taus"]), [ResampleInference.from_dict(x) for x in d["levels"]],
                   np.asarray(d["skipped"], int))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "j", "feature", "estimate", "se", "ci_lower", "ci_upper", "p"])
            for tau, inf in zip(self.grid.taus, self.inferences):
                for j in range(inf.estimates.size):
                    w.writerow([repr(float(tau)), j, inf.feature_names[j],
                                repr(float(inf.estimates[j])), repr(float(inf.ses[j])),
                                repr(float(inf.ci_lower[j])), repr(float(inf.ci_upper[j])),
                                repr(float(inf.p_values[j]))])


def fused_hdcqr(ds: SurvivalDataset, selector=None, tau_grid=None, B=100, seed=0, threads=1,
                bias_correction=False, split_correction=False) -> FusedHdcqrResult:
    """SPARES with CQR refits at every grid level; a resample whose refit is not
    estimable at a level is dropped from that level only."""
    grid = QuantileGrid.default() if tau_grid is None else (
        tau_grid if isinstance(tau_grid, QuantileGrid) else QuantileGrid(tau_grid))
    family = Family("cqr", grid)
    selector = LassoSelector() if selector is None else selector
    results = _run_resamples(ds, selector, family, B, seed, threads)
    _warn_skips(results)
    infs = [_assemble(results, k, ds.feature_names, bias_correction, split_correction)
            for k in range(grid.taus.size)]
    return FusedHdcqrResult(grid, infs, np.array([inf.skipped for inf in infs]))
