"""Censored quantile regression by sequential estimating equations.

For ``log T`` with covariates ``X`` (an intercept column is prepended), the
coefficient ``beta(tau_k)`` solves

    sum_i X_i [ d_i I(Z_i <= X_i'b)
                - sum_{j<k} I(Z_i >= X_i'beta(tau_j)) (H(tau_{j+1}) - H(tau_j)) ] = 0,

with ``Z = log Y``, ``H(u) = -log(1 - u)``, ``tau_0 = 0`` and
``beta(tau_0) = -inf``. Its left side is (half) a subgradient of the convex
function

    sum_{d_i = 1} |Z_i - X_i'b| + (sum_l d_l X_l - 2 sum_r w_r X_r)' b,

so each grid point is a linear program. The linear term is what the usual
pair of large-constant pseudo-observations reduces to; solving it directly
avoids the constant. The constraints do not depend on ``tau``, so each grid
point is re-optimized from the previous optimal basis.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .lp import LPUnbounded, Simplex
from .survdata import DegenerateDataError, SurvivalDataset


def H(u):
    """Cumulative hazard of the uniform quantile scale, ``-log(1 - u)``."""
    return -np.log1p(-np.asarray(u, dtype=float))


@dataclass(frozen=True)
class QuantileGrid:
    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float).reshape(-1)
        if taus.size == 0:
            raise ValueError("empty quantile grid")
        if np.any(taus <= 0) or np.any(taus >= 1):
            raise ValueError("quantile levels must lie in (0, 1)")
        if np.any(np.diff(taus) <= 0):
            raise ValueError("quantile levels must be strictly increasing")
        object.__setattr__(self, "taus", taus)

    @property
    def tau_upper(self) -> float:
        return float(self.taus[-1])

    @property
    def H_values(self) -> np.ndarray:
        return H(self.taus)

    @classmethod
    def default(cls, start=0.05, tau_upper=0.7, step=0.05):
        k = int(round((tau_upper - start) / step))
        return cls(start + step * np.arange(k + 1))


@dataclass
class CqrFit:
    grid: QuantileGrid
    coefficients: np.ndarray     # (len(taus), p + 1); column 0 is the intercept
    estimable: np.ndarray
    feature_names: tuple = ()

    def coef(self, tau):
        """Piecewise-constant coefficients: ``beta(tau_k)`` for ``tau_{k-1} <= tau < tau_k``.

        Levels above the last grid point take the last row.
        """
        taus = self.grid.taus
        k = np.searchsorted(taus, np.asarray(tau, dtype=float), side="right")
        return self.coefficients[np.minimum(k, taus.size - 1)]

    def predict_quantile(self, X, tau):
        """Predicted ``tau``-quantile of ``log T``."""
        b = self.coef(tau)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return b[0] + X @ b[1:]

    def write_csv(self, path):
        names = ("intercept",) + tuple(self.feature_names or
                                       (f"x{j + 1}" for j in range(self.coefficients.shape[1] - 1)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "coefficient", "value", "estimable"])
            for tau, row, ok in zip(self.grid.taus, self.coefficients, self.estimable):
                for name, v in zip(names, row):
                    w.writerow([repr(float(tau)), name, repr(float(v)), int(ok)])

    def to_dict(self):
        return {"taus": self.grid.taus.tolist(), "coefficients": self.coefficients.tolist(),
                "estimable": self.estimable.tolist(), "feature_names": list(self.feature_names)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(QuantileGrid(d["taus"]), np.asarray(d["coefficients"], float),
                   np.asarray(d["estimable"], bool), tuple(d.get("feature_names", ())))


def fit_cqr(ds: SurvivalDataset, grid: QuantileGrid | None = None, norm_bound=1e3,
            refine: int = 1) -> CqrFit:
    """Sequential censored quantile regression of ``log Y`` on ``[1, X]``.

    ``refine > 1`` solves on an internal grid with each interval of ``grid``
    cut into ``refine`` equal pieces (the first interval starts at 0) and
    reports the requested levels only; the sequential sums then track the
    integral in the estimating equation more closely.

    When the program at some level is unbounded, or the solution is
    implausibly large (``max |b_j| sd_j > norm_bound``), that level and all
    later ones are flagged as not estimable and carry the last estimable row.
    """
    grid = QuantileGrid.default() if grid is None else grid
    ds.require_events()
    Z = np.log(ds.time)
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    q = X1.shape[1]
    ev = ds.event
    if q >= ev.sum():
        raise DegenerateDataError(f"{q} coefficients but only {int(ev.sum())} events")
    Xe, Ze = X1[ev], Z[ev]
    m = Xe.shape[0]
    # variables: b+ (q), b- (q), u (m), v (m) with Xe(b+ - b-) + u - v = Ze
    A_eq = np.hstack([Xe, -Xe, np.eye(m), -np.eye(m)])
    lp = Simplex(A_eq=A_eq, b_eq=Ze, n_vars=2 * q + 2 * m)
    scale = np.concatenate([[1.0], ds.X.std(axis=0)])
    scale[scale == 0] = 1.0

    if refine < 1:
        raise ValueError("refine must be >= 1")
    edges = np.concatenate([[0.0], grid.taus])
    taus = np.concatenate([np.linspace(a, b, refine + 1)[1:]
                           for a, b in zip(edges[:-1], edges[1:])])
    report = np.arange(1, grid.taus.size + 1) * refine - 1
    Hs = np.concatenate([[0.0], H(taus)])
    coefs = np.zeros((taus.size, q))
    ok = np.zeros(taus.size, dtype=bool)
    base = Xe.sum(axis=0)
    # w_r accumulates I(Z_r >= X_r'beta(tau_j)) dH_j; beta(tau_0) = -inf
    at_risk = np.ones(ds.n, dtype=bool)
    w = np.zeros(ds.n)
    ones = np.ones(2 * m)
    for k in range(taus.size):
        w += at_risk * (Hs[k + 1] - Hs[k])
        c = base - 2.0 * (w @ X1)
        try:
            res = lp.minimize(np.concatenate([c, -c, ones]))
        except LPUnbounded:
            break
        b = res.x[:q] - res.x[q:2 * q]
        if np.max(np.abs(b) * scale) > norm_bound:
            break
        coefs[k] = b
        ok[k] = True
        # observations interpolated by the LP vertex sit exactly on the fit and count
        # as at risk; the tolerance keeps round-off from deciding that
        at_risk = Z - X1 @ b >= -1e-9 * (1.0 + np.abs(Z))
    last = int(ok.sum())
    if last == 0:
        raise DegenerateDataError("no quantile level in the grid is estimable")
    coefs[last:] = coefs[last - 1]
    return CqrFit(grid, coefs[report], ok[report], ds.feature_names)
