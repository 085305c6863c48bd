"""Kaplan-Meier, Nelson-Aalen, two-sample log-rank and Harrell's C-index."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .survdata import DataError, DegenerateDataError, SurvivalDataset


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function: ``f(t) = values[k]`` for ``knots[k] <= t < knots[k+1]``."""

    knots: np.ndarray
    values: np.ndarray
    left_value: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).reshape(-1)
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if k.size != v.size:
            raise ValueError("knots and values differ in length")
        if k.size > 1 and np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "left_value", float(self.left_value))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        vals = np.concatenate(([self.left_value], self.values))
        out = vals[idx + 1]
        return out if out.ndim else float(out)

    def to_dict(self):
        return {"knots": self.knots.tolist(), "values": self.values.tolist(),
                "left_value": self.left_value}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(d["knots"], d["values"], d.get("left_value", 0.0))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def average_step_functions(funcs, weights=None) -> StepFunction:
    """Pointwise (weighted) mean of step functions on the union of their knots."""
    funcs = list(funcs)
    if not funcs:
        raise ValueError("nothing to average")
    knots = np.unique(np.concatenate([f.knots for f in funcs]))
    w = np.full(len(funcs), 1.0 / len(funcs)) if weights is None else np.asarray(weights, float)
    vals = sum(wi * f(knots) for wi, f in zip(w, funcs)) if knots.size else np.empty(0)
    left = float(sum(wi * f.left_value for wi, f in zip(w, funcs)))
    return StepFunction(knots, vals, left)


def risk_table(time, event):
    """Distinct event times with event counts and at-risk counts.

    Events at a time ``t`` are counted before censorings at ``t``; a subject
    censored at ``t`` is still at risk at ``t``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    ut = np.unique(time[event])
    if ut.size == 0:
        return ut, np.empty(0), np.empty(0)
    st = np.sort(time)
    at_risk = time.size - np.searchsorted(st, ut, side="left")
    d = np.bincount(np.searchsorted(ut, time[event]), minlength=ut.size)
    return ut, d.astype(float), at_risk.astype(float)


def _km_arrays(time, event):
    ut, d, r = risk_table(time, event)
    surv = np.cumprod(1.0 - d / r)
    return ut, surv


def kaplan_meier(ds: SurvivalDataset) -> StepFunction:
    """Product-limit survival curve with knots at the distinct event times."""
    if ds.n == 0:
        raise DataError("empty dataset")
    ut, surv = _km_arrays(ds.time, ds.event)
    return StepFunction(ut, surv, 1.0)


def nelson_aalen(ds: SurvivalDataset) -> StepFunction:
    if ds.n == 0:
        raise DataError("empty dataset")
    ut, d, r = risk_table(ds.time, ds.event)
    return StepFunction(ut, np.cumsum(d / r), 0.0)


def logrank_from_arrays(time, event, in_a):
    """Two-sample log-rank chi-square (1 df); ``in_a`` flags group membership."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    in_a = np.asarray(in_a, dtype=bool)
    ut, d, r = risk_table(time, event)
    if ut.size == 0:
        raise DegenerateDataError("log-rank test needs at least one event")
    ta = np.sort(time[in_a])
    ra = (ta.size - np.searchsorted(ta, ut, side="left")).astype(float)
    da = np.bincount(np.searchsorted(ut, time[event & in_a]), minlength=ut.size).astype(float)
    expected = d * ra / r
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(r > 1, d * (ra / r) * (1.0 - ra / r) * (r - d) / (r - 1.0), 0.0)
    o_minus_e = da.sum() - expected.sum()
    v = var.sum()
    stat = 0.0 if v <= 0 else o_minus_e ** 2 / v
    return float(stat), float(stats.chi2.sf(stat, 1))


def logrank(group_a: SurvivalDataset, group_b: SurvivalDataset) -> dict:
    if group_a.n == 0 or group_b.n == 0:
        raise DataError("log-rank test needs two non-empty groups")
    time = np.concatenate([group_a.time, group_b.time])
    event = np.concatenate([group_a.event, group_b.event])
    in_a = np.arange(time.size) < group_a.n
    stat, pval = logrank_from_arrays(time, event, in_a)
    return {"statistic": stat, "p_value": pval}


def concordance_counts(time, event, risk, block=2048):
    """Counts of (concordant + 0.5 * tied, comparable) pairs.

    A pair (i, j) is comparable when ``event[i]`` and ``time[i] < time[j]``;
    it is concordant when ``risk[i] > risk[j]``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    risk = np.asarray(risk, dtype=float)
    conc = 0.0
    comparable = 0
    ev = np.flatnonzero(event)
    for s in range(0, ev.size, block):
        i = ev[s:s + block]
        cmp_mask = time[i][:, None] < time[None, :]
        diff = risk[i][:, None] - risk[None, :]
        comparable += int(cmp_mask.sum())
        conc += float(((diff > 0) & cmp_mask).sum()) + 0.5 * float(((diff == 0) & cmp_mask).sum())
    return conc, comparable


def c_index(ds: SurvivalDataset, risk_scores) -> float:
    """Harrell's C: higher risk score should accompany shorter survival."""
    risk = np.asarray(risk_scores, dtype=float).reshape(-1)
    if risk.size != ds.n:
        raise DataError("risk score length does not match dataset")
    conc, comparable = concordance_counts(ds.time, ds.event, risk)
    if comparable == 0:
        raise DegenerateDataError("no comparable pairs")
    return conc / comparable
