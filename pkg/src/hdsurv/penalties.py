"""Penalty family for regularized Cox regression.

Conventions
-----------
The penalized objective is ``loss(beta) + penalty_term(spec, beta)``. For
every kind except SCAD, ``penalty_term = eta * penalty_value``; the SCAD
penalty is parameterized directly by ``eta`` (its derivative is
``eta * {1(|b| <= eta) + (alpha*eta - |b|)_+ / ((alpha - 1) eta) 1(|b| > eta)}``),
so for SCAD ``penalty_term == penalty_value``.

The group lasso uses the Euclidean norm of each block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

KINDS = ("ridge", "lasso", "elastic_net", "adaptive_lasso", "scad",
         "group_lasso", "fused_lasso", "kernel_elastic_net")

PROX_KINDS = ("ridge", "lasso", "elastic_net", "adaptive_lasso", "group_lasso",
              "kernel_elastic_net", "scad")


class PenaltyError(ValueError):
    pass


class UnsupportedOperation(PenaltyError):
    pass


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    kind: str
    eta: float = 1.0
    alpha: float | None = None
    weights: np.ndarray | None = None
    groups: tuple | None = None
    sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PenaltyError(f"unknown penalty kind {self.kind!r}")
        if not self.eta > 0:
            raise PenaltyError("eta must be positive")
        alpha = self.alpha
        if self.kind == "scad":
            alpha = 3.7 if alpha is None else float(alpha)
            if not alpha > 2:
                raise PenaltyError("SCAD requires alpha > 2")
        elif self.kind in ("elastic_net", "kernel_elastic_net"):
            alpha = 0.5 if alpha is None else float(alpha)
            lo_ok = alpha > 0 if self.kind == "elastic_net" else alpha >= 0
            if not (lo_ok and alpha < 1):
                raise PenaltyError(f"{self.kind} requires alpha in (0, 1)")
        object.__setattr__(self, "alpha", alpha)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise PenaltyError("weights must be finite and non-negative")
            object.__setattr__(self, "weights", w)
        elif self.kind == "adaptive_lasso":
            raise PenaltyError("adaptive_lasso requires weights")
        if self.kind == "group_lasso":
            if self.groups is None:
                raise PenaltyError("group_lasso requires groups")
            groups = tuple(tuple(int(j) for j in g) for g in self.groups)
            flat = sorted(j for g in groups for j in g)
            if flat != list(range(len(flat))):
                raise PenaltyError("groups must partition {0, ..., p-1}")
            object.__setattr__(self, "groups", groups)
        if self.kind == "kernel_elastic_net":
            if self.sigma is None:
                raise PenaltyError("kernel_elastic_net requires sigma")
            S = np.asarray(self.sigma, dtype=float)
            if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-10):
                raise PenaltyError("sigma must be a symmetric square matrix")
            if np.linalg.eigvalsh(S).min() < -1e-8 * max(1.0, np.abs(S).max()):
                raise PenaltyError("sigma must be positive semi-definite")
            object.__setattr__(self, "sigma", S)

    def with_eta(self, eta) -> "PenaltySpec":
        return PenaltySpec(self.kind, eta, self.alpha, self.weights, self.groups, self.sigma)

    def to_dict(self):
        d = {"kind": self.kind, "eta": self.eta}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        if self.weights is not None:
            d["weights"] = self.weights.tolist()
        if self.groups is not None:
            d["groups"] = [list(g) for g in self.groups]
        if self.sigma is not None:
            d["sigma"] = self.sigma.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("eta", 1.0), d.get("alpha"), d.get("weights"),
                   d.get("groups"), d.get("sigma"))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _check_dim(spec, beta):
    p = beta.size
    if spec.weights is not None and spec.weights.size != p:
        raise PenaltyError(f"weights length {spec.weights.size} != p = {p}")
    if spec.groups is not None and sum(len(g) for g in spec.groups) != p:
        raise PenaltyError("groups do not cover beta")
    if spec.sigma is not None and spec.sigma.shape[0] != p:
        raise PenaltyError(f"sigma is {spec.sigma.shape}, p = {p}")


def scad_derivative(eta, alpha, abs_beta):
    b = np.abs(np.asarray(abs_beta, dtype=float))
    out = eta * np.where(b <= eta, 1.0,
                         np.maximum(alpha * eta - b, 0.0) / ((alpha - 1.0) * eta))
    return out if out.ndim else float(out)


def scad_value(eta, alpha, abs_beta):
    """Integral of :func:`scad_derivative` from 0: a quadratic spline with knots eta, alpha*eta."""
    b = np.abs(np.asarray(abs_beta, dtype=float))
    mid = (2 * alpha * eta * b - b ** 2 - eta ** 2) / (2 * (alpha - 1))
    out = np.where(b <= eta, eta * b,
                   np.where(b <= alpha * eta, mid, (alpha + 1) * eta ** 2 / 2))
    return out if out.ndim else float(out)


def penalty_value(spec: PenaltySpec, beta):
    """Pen(beta). Fused lasso returns the pair ``(sum |b_j|, sum |b_j - b_{j-1}|)``."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    _check_dim(spec, beta)
    k = spec.kind
    if k == "ridge":
        return float(beta @ beta)
    if k == "lasso":
        return float(np.abs(beta).sum())
    if k == "elastic_net":
        return float(spec.alpha * np.abs(beta).sum() + (1 - spec.alpha) * beta @ beta)
    if k == "adaptive_lasso":
        return float(spec.weights @ np.abs(beta))
    if k == "scad":
        return float(np.sum(scad_value(spec.eta, spec.alpha, beta)))
    if k == "group_lasso":
        return float(sum(np.linalg.norm(beta[list(g)]) for g in spec.groups))
    if k == "fused_lasso":
        return float(np.abs(beta).sum()), float(np.abs(np.diff(beta)).sum())
    if k == "kernel_elastic_net":
        return float(spec.alpha * np.abs(beta).sum() + (1 - spec.alpha) * beta @ spec.sigma @ beta)
    raise PenaltyError(k)  # pragma: no cover


def penalty_term(spec: PenaltySpec, beta) -> float:
    """The amount added to the loss in the penalized objective."""
    if spec.kind == "fused_lasso":
        l1, tv = penalty_value(spec, beta)
        return spec.eta * (l1 + tv)
    v = penalty_value(spec, beta)
    return v if spec.kind == "scad" else spec.eta * v


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _scad_prox(z, eta, alpha, step):
    if step >= alpha - 1:
        raise PenaltyError("SCAD prox requires step < alpha - 1 (non-convex subproblem)")
    a = np.abs(z)
    small = soft_threshold(z, step * eta)
    mid = soft_threshold(z, step * alpha * eta / (alpha - 1)) / (1 - step / (alpha - 1))
    return np.where(a <= eta * (1 + step), small, np.where(a <= alpha * eta, mid, z))


def _quad_l1_prox(A, z, thresh, tol=1e-13, max_sweeps=10_000):
    """argmin_y 0.5 y'Ay - z'y + thresh * ||y||_1 by coordinate descent (A positive definite)."""
    y = np.linalg.solve(A, z) if thresh == 0 else np.zeros_like(z)
    if thresh == 0:
        return y
    diag = np.diag(A).copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(z.size):
            r = z[j] - A[j] @ y + diag[j] * y[j]
            new = soft_threshold(r, thresh) / diag[j]
            delta = max(delta, abs(new - y[j]))
            y[j] = new
        if delta <= tol:
            break
    return y


def prox(spec: PenaltySpec, z, step):
    """argmin_y ``0.5 ||y - z||^2 + step * penalty_term(spec, y)``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    _check_dim(spec, z)
    if spec.kind not in PROX_KINDS:
        raise UnsupportedOperation(f"no proximal map for {spec.kind}")
    t = step * spec.eta
    k = spec.kind
    if k == "lasso":
        return soft_threshold(z, t)
    if k == "adaptive_lasso":
        return soft_threshold(z, t * spec.weights)
    if k == "ridge":
        return z / (1.0 + 2.0 * t)
    if k == "elastic_net":
        return soft_threshold(z, t * spec.alpha) / (1.0 + 2.0 * t * (1 - spec.alpha))
    if k == "group_lasso":
        out = np.zeros_like(z)
        for g in spec.groups:
            g = list(g)
            nrm = np.linalg.norm(z[g])
            if nrm > t:
                out[g] = (1.0 - t / nrm) * z[g]
        return out
    if k == "kernel_elastic_net":
        A = np.eye(z.size) + 2.0 * t * (1 - spec.alpha) * spec.sigma
        return _quad_l1_prox(A, z, t * spec.alpha)
    if k == "scad":
        return _scad_prox(z, spec.eta, spec.alpha, step)
    raise PenaltyError(k)  # pragma: no cover


def rbf_column_kernel(X, bandwidth=None):
    """RBF similarity between covariate columns of ``X``.

    ``bandwidth`` defaults to the median pairwise distance between columns.
    """
    X = np.asarray(X, dtype=float)
    C = X.T
    sq = np.sum(C ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * C @ C.T, 0.0)
    if bandwidth is None:
        iu = np.triu_indices(C.shape[0], 1)
        med = np.median(np.sqrt(d2[iu])) if iu[0].size else 1.0
        bandwidth = med if med > 0 else 1.0
    K = np.exp(-d2 / (2.0 * bandwidth ** 2))
    return 0.5 * (K + K.T)
