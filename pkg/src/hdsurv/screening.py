"""Marginal screening of covariates before a penalized fit.

Each covariate is scored on its own, either by the magnitude of its
univariate Cox coefficient or by how far its concordance index is from 1/2,
and the ``d`` highest-scoring covariates are retained.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._parallel import map_ordered
from .coxcore import fit_mple
from .nonparam import concordance_counts
from .survdata import SurvivalDataset


@dataclass
class ScreenResult:
    scores: np.ndarray
    kept: np.ndarray
    threshold_rule: str
    d: int

    def to_dict(self):
        return {"scores": self.scores.tolist(), "kept": self.kept.tolist(),
                "threshold_rule": self.threshold_rule, "d": self.d}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["scores"], float), np.asarray(d["kept"], int),
                   d["threshold_rule"], int(d["d"]))

    def apply(self, ds: SurvivalDataset) -> SurvivalDataset:
        """The dataset restricted to the retained columns."""
        return ds.select_columns(self.kept)


def default_d(n: int, p: int) -> int:
    """floor(n / log n), capped at p."""
    return max(1, min(p, int(math.floor(n / math.log(n))) if n > 2 else 1))


def top_d(scores, d: int) -> np.ndarray:
    """Indices of the ``d`` largest scores, ties going to the lower index; sorted."""
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:d])


def _finish(scores, d, cutoff):
    p = scores.size
    if cutoff is not None:
        kept = np.flatnonzero(scores >= cutoff)
        return ScreenResult(scores, kept, "score_cutoff", int(kept.size))
    if not 1 <= d <= p:
        raise ValueError(f"d must satisfy 1 <= d <= p = {p}, got {d}")
    return ScreenResult(scores, top_d(scores, d), "top_d", int(d))


def _zero_variance(ds):
    return ds.X.std(axis=0) == 0


def marginal_cox_screen(ds: SurvivalDataset, d: int | None = None, cutoff=None,
                        threads=1) -> ScreenResult:
    """Score ``|beta_j|`` from the univariate Cox fit on covariate ``j`` alone."""
    ds.require_events()
    d = default_d(ds.n, ds.p) if d is None and cutoff is None else d
    const = _zero_variance(ds)
    bad = []

    def score(j):
        if const[j]:
            return 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_mple(ds.select_columns([j]))
        if not fit.converged:
            bad.append(j)
            return 0.0
        return abs(float(fit.beta[0]))

    scores = np.array(map_ordered(score, range(ds.p), threads))
    if const.any():
        warnings.warn(f"zero-variance covariates scored 0: {np.flatnonzero(const).tolist()}",
                      stacklevel=2)
    if bad:
        warnings.warn(f"marginal fits did not converge, scored 0: {sorted(bad)}", stacklevel=2)
    return _finish(scores, d, cutoff)


def concordance_screen(ds: SurvivalDataset, d: int | None = None, cutoff=None,
                       threads=1) -> ScreenResult:
    """Score ``|C_j - 1/2|`` with ``C_j`` the concordance index of column ``j``."""
    ds.require_events()
    d = default_d(ds.n, ds.p) if d is None and cutoff is None else d

    def score(j):
        conc, comparable = concordance_counts(ds.time, ds.event, ds.X[:, j])
        return abs(conc / comparable - 0.5) if comparable else 0.0

    scores = np.array(map_ordered(score, range(ds.p), threads))
    return _finish(scores, d, cutoff)
