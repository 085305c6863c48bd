"""Survival support vector machines: ranking, regression and hybrid objectives.

With ``f(x) = <psi, F(x)> = sum_k alpha_k K(X_k, x)`` the fitted objective is

    J = 1/2 alpha'K alpha + gamma * [mix * rank_loss + (1 - mix) * reg_loss]

    rank_loss = sum_{v_ij = 1} max(0, margin - (f(X_j) - f(X_i)))
    reg_loss  = sum_i max(0, Y_i - f_i - a) + delta_i max(0, f_i + a - Y_i)

with ``v_ij = delta_i 1(Y_i < Y_j)`` and ``Y`` on the log-time scale for the
regression part. Higher ``f`` means longer predicted survival.

The solver is a full-batch functional subgradient method: each step moves
``c / sqrt(t)`` times ``sqrt(2 J(0))`` (a bound on ``||psi*||``) along the
normalized subgradient, and iterates are averaged with weights ``~ t``. Every ``check_every`` steps
the averaged iterate's objective is compared with the previous checkpoint;
if it went up, the iterate and the average are reset to that checkpoint and
the step constant is halved, so the checkpointed objectives never increase.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .survdata import DegenerateDataError, SurvivalDataset

MAX_PAIRS = 50_000


def median_bandwidth(X) -> float:
    """Median pairwise Euclidean distance (1.0 if all points coincide)."""
    d = pdist(np.asarray(X, float))
    h = float(np.median(d)) if d.size else 0.0
    return h if h > 0 else 1.0


def kernel_matrix(A, B, kernel="linear", bandwidth=None):
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    if kernel == "linear":
        return A @ B.T
    if kernel == "rbf":
        if bandwidth is None or not bandwidth > 0:
            raise ValueError("rbf bandwidth must be positive")
        return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth ** 2))
    raise ValueError(f"unknown kernel {kernel!r}")


def comparable_pairs(time, event, max_pairs=MAX_PAIRS, seed=0):
    """Index arrays ``(i, j)`` with ``delta_i = 1`` and ``Y_i < Y_j``.

    Beyond ``max_pairs`` a seeded uniform subsample (kept in lexicographic
    order) is returned.
    """
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    ii, jj = [], []
    for i in np.flatnonzero(event):
        j = np.flatnonzero(time > time[i])
        ii.append(np.full(j.size, i))
        jj.append(j)
    if not ii:
        return np.zeros(0, int), np.zeros(0, int)
    ii, jj = np.concatenate(ii), np.concatenate(jj)
    if ii.size > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(ii.size, max_pairs, replace=False))
        ii, jj = ii[keep], jj[keep]
    return ii, jj


def rank_loss(f, pairs, margin=1.0):
    """Sum of pair hinges ``max(0, margin - (f_j - f_i))``."""
    i, j = pairs
    return float(np.sum(np.maximum(0.0, margin - (f[j] - f[i]))))


def regression_loss(pred, y, event):
    """``sum max(0, y - pred) + delta * max(0, pred - y)``."""
    return float(np.sum(np.maximum(0.0, y - pred) + event * np.maximum(0.0, pred - y)))


def _rank_subgrad(f, pairs, n, margin):
    i, j = pairs
    act = (f[j] - f[i]) < margin
    return (np.bincount(i[act], minlength=n) - np.bincount(j[act], minlength=n)).astype(float)


def _reg_subgrad(pred, y, event):
    # d/dpred of max(0, y - pred) + delta max(0, pred - y)
    return np.where(pred < y, -1.0, 0.0) + np.where(pred > y, event.astype(float), 0.0)


@dataclass
class SvmModel:
    kernel: str
    dual_coefficients: np.ndarray
    intercept: float | None
    gamma: float
    mode: str
    mix: float
    X_train: np.ndarray
    bandwidth: float | None = None
    margin: float = 1.0
    objective_trace: list = field(default_factory=list)
    feature_names: tuple = ()

    def decision_function(self, X):
        K = kernel_matrix(np.asarray(X, float), self.X_train, self.kernel, self.bandwidth)
        return K @ self.dual_coefficients

    def risk_score(self, X):
        """``-f(X)``: larger means shorter predicted survival."""
        return -self.decision_function(X)

    def predict_log_time(self, X):
        if self.intercept is None:
            raise ValueError("rank-mode models predict orderings only, not survival times")
        return self.decision_function(X) + self.intercept

    @property
    def objective(self):
        return self.objective_trace[-1] if self.objective_trace else float("nan")

    def to_dict(self):
        return {"kernel": self.kernel, "bandwidth": self.bandwidth,
                "dual_coefficients": self.dual_coefficients.tolist(),
                "intercept": self.intercept, "gamma": self.gamma, "mode": self.mode,
                "mix": self.mix, "margin": self.margin, "X_train": self.X_train.tolist(),
                "objective_trace": list(self.objective_trace),
                "feature_names": list(self.feature_names)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["kernel"], np.asarray(d["dual_coefficients"], float), d["intercept"],
                   d["gamma"], d["mode"], d["mix"], np.asarray(d["X_train"], float),
                   d["bandwidth"], d["margin"], list(d["objective_trace"]),
                   tuple(d["feature_names"]))


def fit_hybrid_svm(ds: SurvivalDataset, kernel="linear", gamma=1.0, mix=0.5, bandwidth=None,
                   margin=1.0, max_iter=500, step=0.1, check_every=100,
                   max_pairs=MAX_PAIRS, seed=0) -> SvmModel:
    """Minimize the hybrid objective; ``mix = 1`` is the rank SVM, ``mix = 0`` the
    regression SVM."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not 0 <= mix <= 1:
        raise ValueError("mix must lie in [0, 1]")
    X = ds.X
    n = ds.n
    if kernel == "rbf" and bandwidth is None:
        bandwidth = median_bandwidth(X)
    K = kernel_matrix(X, X, kernel, bandwidth)
    y = np.log(ds.time)
    ev = ds.event
    pairs = comparable_pairs(ds.time, ev, max_pairs, seed)
    if mix > 0 and pairs[0].size == 0:
        raise DegenerateDataError("no comparable pairs (need an event before a later time)")
    use_a = mix < 1
    y_scale = float(np.std(y)) or 1.0

    def objective(alpha, a):
        f = K @ alpha
        val = 0.5 * alpha @ f
        if mix > 0:
            val += gamma * mix * rank_loss(f, pairs, margin)
        if mix < 1:
            val += gamma * (1 - mix) * regression_loss(f + a, y, ev)
        return float(val)

    def subgrad(f, a):
        g = np.zeros(n)
        if mix > 0:
            g += mix * _rank_subgrad(f, pairs, n, margin)
        ga = 0.0
        if mix < 1:
            gr = (1 - mix) * _reg_subgrad(f + a, y, ev)
            g += gr
            ga = float(gr.sum())
        return g, ga

    alpha = np.zeros(n)
    a = float(np.median(y)) if use_a else 0.0
    f = np.zeros(n)
    avg_alpha, avg_a = alpha.copy(), a
    ck_alpha, ck_a = alpha.copy(), a
    ck_val = objective(alpha, a)
    trace = [ck_val]
    # ||psi*||^2 / 2 <= J(0): step lengths are measured against that radius
    radius = np.sqrt(2.0 * max(ck_val, 1e-300))
    t_avg = 0
    c = step
    for t in range(1, max_iter + 1):
        s_t = c / np.sqrt(t)
        g, ga = subgrad(f, a)
        # subgradient functional psi + gamma sum_k g_k K(X_k, .) in coefficient form
        D = alpha + gamma * g
        KD = K @ D
        norm = np.sqrt(max(D @ KD, 0.0))
        if norm > 0:
            alpha = alpha - (s_t * radius / norm) * D
            f = f - (s_t * radius / norm) * KD
        if use_a:
            # unpenalized intercept: step in log-time units, scaled by the
            # fraction of unbalanced hinge terms
            a -= s_t * y_scale * ga / ((1 - mix) * n)
        t_avg += 1
        rho = 2.0 / (t_avg + 1.0)
        avg_alpha = (1.0 - rho) * avg_alpha + rho * alpha
        avg_a = (1.0 - rho) * avg_a + rho * a
        if t % check_every == 0 or t == max_iter:
            val = objective(avg_alpha, avg_a)
            if val > ck_val:
                # averaged iterate got worse: restart from the last checkpoint
                # with half the step constant
                c *= 0.5
                alpha, a = ck_alpha.copy(), ck_a
                f = K @ alpha
                avg_alpha, avg_a = ck_alpha.copy(), ck_a
                t_avg = 0
                val = ck_val
            ck_alpha, ck_a, ck_val = avg_alpha.copy(), avg_a, val
            trace.append(val)
    mode = "rank" if mix == 1 else "regression" if mix == 0 else "hybrid"
    return SvmModel(kernel, ck_alpha, ck_a if use_a else None, float(gamma), mode, float(mix),
                    X.copy(), bandwidth, margin, trace, ds.feature_names)


def fit_rank_svm(ds: SurvivalDataset, kernel="linear", gamma=1.0, **opts) -> SvmModel:
    """Pairwise ranking SVM over comparable pairs; no intercept."""
    return fit_hybrid_svm(ds, kernel, gamma, mix=1.0, **opts)


def fit_regression_svm(ds: SurvivalDataset, kernel="linear", gamma=1.0, **opts) -> SvmModel:
    """Censoring-aware regression SVM on log-times."""
    return fit_hybrid_svm(ds, kernel, gamma, mix=0.0, **opts)
