"""Survival trees, bagging, random survival forests and Cox gradient boosting.

A survival tree is grown by recursive partitioning: at each node every
candidate split ``x_j <= c`` (``c`` a midpoint between consecutive distinct
values) is scored by the two-sample log-rank statistic, the best one is
taken if it is significant at ``alpha_stop`` and both children keep at least
``min_events`` events, and terminal nodes carry Kaplan-Meier and
Nelson-Aalen curves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._parallel import map_ordered, spawn_generators
from .coxcore import CoxRiskSets
from .nonparam import StepFunction, average_step_functions, concordance_counts, risk_table
from .survdata import DegenerateDataError, SurvivalDataset

CRITERIA = ("logrank", "martingale")


# ---------------------------------------------------------------- split scoring

def logrank_split_scan(time, event, x, min_events=1):
    """Log-rank chi-square for every split ``x <= c`` over midpoints ``c``.

    Returns ``(thresholds, statistics)``; splits leaving fewer than
    ``min_events`` events on either side are dropped.
    """
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    x = np.asarray(x, float)
    ut, d, r = risk_table(time, event)
    if ut.size == 0:
        return np.empty(0), np.empty(0)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cut = np.flatnonzero(xs[1:] > xs[:-1]) + 1          # left = first ``cut`` subjects
    if cut.size == 0:
        return np.empty(0), np.empty(0)
    ts, es = time[order], event[order]
    ev_left = np.cumsum(es)[cut - 1]
    ok = (ev_left >= min_events) & (es.sum() - ev_left >= min_events)
    cut = cut[ok]
    if cut.size == 0:
        return np.empty(0), np.empty(0)
    at_risk = (ts[:, None] >= ut[None, :]).astype(float)
    dead = ((ts[:, None] == ut[None, :]) & es[:, None]).astype(float)
    RL = np.cumsum(at_risk, axis=0)[cut - 1]
    DL = np.cumsum(dead, axis=0)[cut - 1]
    frac = RL / r
    o_minus_e = np.sum(DL - d * frac, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(r > 1, d * frac * (1.0 - frac) * (r - d) / (r - 1.0), 0.0).sum(axis=1)
    stat = np.where(v > 0, o_minus_e ** 2 / np.where(v > 0, v, 1.0), 0.0)
    thr = 0.5 * (xs[cut - 1] + xs[cut])
    return thr, stat


def martingale_split_scan(time, event, x, min_events=1):
    """Squared two-sample t statistic of node martingale residuals for each split."""
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    x = np.asarray(x, float)
    ut, d, r = risk_table(time, event)
    H = np.concatenate([[0.0], np.cumsum(d / r)]) if ut.size else np.zeros(1)
    resid = event - H[np.searchsorted(ut, time, side="right")]
    order = np.argsort(x, kind="stable")
    xs, rs, es = x[order], resid[order], event[order]
    cut = np.flatnonzero(xs[1:] > xs[:-1]) + 1
    ev_left = np.cumsum(es)[cut - 1] if cut.size else np.empty(0)
    ok = (ev_left >= min_events) & (es.sum() - ev_left >= min_events)
    cut = cut[ok]
    if cut.size == 0:
        return np.empty(0), np.empty(0)
    n = xs.size
    s1, s2 = np.cumsum(rs), np.cumsum(rs ** 2)
    nl = cut.astype(float)
    nr = n - nl
    ml = s1[cut - 1] / nl
    mr = (s1[-1] - s1[cut - 1]) / nr
    sse = (s2[cut - 1] - nl * ml ** 2) + (s2[-1] - s2[cut - 1] - nr * mr ** 2)
    s2p = sse / max(n - 2, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t2 = np.where(s2p > 0, (ml - mr) ** 2 / (s2p * (1 / nl + 1 / nr)), 0.0)
    return 0.5 * (xs[cut - 1] + xs[cut]), t2


# ---------------------------------------------------------------- trees

@dataclass
class Node:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    survival: StepFunction | None = None
    chf: StepFunction | None = None
    n_node: int = 0
    events_node: int = 0
    statistic: float = 0.0

    @property
    def is_terminal(self):
        return self.feature < 0

    def to_dict(self):
        if self.is_terminal:
            return {"survival": self.survival.to_dict(), "chf": self.chf.to_dict(),
                    "n_node": self.n_node, "events_node": self.events_node}
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "n_node": self.n_node, "events_node": self.events_node,
                "statistic": self.statistic}

    @classmethod
    def from_dict(cls, d):
        if "survival" in d:
            return cls(survival=StepFunction.from_dict(d["survival"]),
                       chf=StepFunction.from_dict(d["chf"]), n_node=d["n_node"],
                       events_node=d["events_node"])
        return cls(d["feature"], d["threshold"], d["left"], d["right"], n_node=d["n_node"],
                   events_node=d["events_node"], statistic=d["statistic"])


@dataclass
class SurvivalTree:
    nodes: list
    min_events: int
    max_depth: int | None
    alpha_stop: float = 0.05
    criterion: str = "logrank"

    def apply(self, X) -> np.ndarray:
        """Terminal node index for each row (``x_j <= threshold`` goes left)."""
        X = np.atleast_2d(np.asarray(X, float))
        out = np.zeros(X.shape[0], dtype=int)
        active = np.arange(X.shape[0])
        cur = np.zeros(X.shape[0], dtype=int)
        while active.size:
            nxt = []
            for node_id in np.unique(cur[active]):
                rows = active[cur[active] == node_id]
                node = self.nodes[node_id]
                if node.is_terminal:
                    out[rows] = node_id
                    continue
                go_left = X[rows, node.feature] <= node.threshold
                cur[rows[go_left]] = node.left
                cur[rows[~go_left]] = node.right
                nxt.append(rows)
            active = np.concatenate(nxt) if nxt else np.zeros(0, int)
        return out

    def terminals(self):
        return [k for k, nd in enumerate(self.nodes) if nd.is_terminal]

    def to_dict(self):
        return {"nodes": [nd.to_dict() for nd in self.nodes], "min_events": self.min_events,
                "max_depth": self.max_depth, "alpha_stop": self.alpha_stop,
                "criterion": self.criterion}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls([Node.from_dict(nd) for nd in d["nodes"]], d["min_events"], d["max_depth"],
                   d["alpha_stop"], d["criterion"])


def _terminal(time, event):
    ut, d, r = risk_table(time, event)
    return Node(survival=StepFunction(ut, np.cumprod(1.0 - d / r), 1.0),
                chf=StepFunction(ut, np.cumsum(d / r), 0.0),
                n_node=int(time.size), events_node=int(event.sum()))


def _best_split(time, event, X, features, min_events, criterion):
    scan = logrank_split_scan if criterion == "logrank" else martingale_split_scan
    best = (-1.0, -1, 0.0)
    for j in features:
        thr, st = scan(time, event, X[:, j], min_events)
        if st.size:
            k = int(np.argmax(st))
            if st[k] > best[0]:
                best = (float(st[k]), int(j), float(thr[k]))
    return best


def grow_tree(ds: SurvivalDataset, min_events=5, max_depth=None, alpha_stop=0.05, mtry=None,
              rng=None, criterion="logrank") -> SurvivalTree:
    """Recursive partitioning with a significance gate and a minimum terminal event count.

    ``mtry`` features are drawn afresh at each split (all of them when ``None``).
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown split criterion {criterion!r}")
    if ds.n_events < 2 * min_events:
        raise DegenerateDataError(
            f"{ds.n_events} events at the root; at least {2 * min_events} needed to split")
    p = ds.p
    mtry = p if mtry is None else int(mtry)
    if not 1 <= mtry <= p:
        raise ValueError("mtry must lie in [1, p]")
    crit = stats.chi2.isf(alpha_stop, 1)
    nodes: list = []

    def build(idx, depth):
        node_id = len(nodes)
        nodes.append(None)
        t, e = ds.time[idx], ds.event[idx]
        can_split = (max_depth is None or depth < max_depth) and e.sum() >= 2 * min_events
        if can_split:
            feats = np.arange(p) if mtry == p else np.sort(rng.choice(p, mtry, replace=False))
            stat, j, thr = _best_split(t, e, ds.X[idx], feats, min_events, criterion)
            if j >= 0 and stat > crit:
                go_left = ds.X[idx, j] <= thr
                node = Node(j, thr, n_node=int(idx.size), events_node=int(e.sum()), statistic=stat)
                nodes[node_id] = node
                node.left = build(idx[go_left], depth + 1)
                node.right = build(idx[~go_left], depth + 1)
                return node_id
        nodes[node_id] = _terminal(t, e)
        return node_id

    build(np.arange(ds.n), 0)
    return SurvivalTree(nodes, min_events, max_depth, alpha_stop, criterion)


def predict_tree(tree: SurvivalTree, x) -> dict:
    node = tree.nodes[int(tree.apply(np.atleast_2d(x))[0])]
    return {"survival": node.survival, "chf": node.chf}


# ---------------------------------------------------------------- ensembles

@dataclass
class Forest:
    trees: list
    B: int
    mtry: int
    oob_indices: list
    seed: int
    kind: str = "rsf"
    oob_c_index: float | None = None
    event_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def oob_error(self):
        return None if self.oob_c_index is None else 1.0 - self.oob_c_index

    def _terminal_curves(self, X, attr):
        X = np.atleast_2d(np.asarray(X, float))
        leaves = [t.apply(X) for t in self.trees]
        return [[getattr(t.nodes[leaf[i]], attr) for t, leaf in zip(self.trees, leaves)]
                for i in range(X.shape[0])]

    def predict_chf(self, X) -> list:
        """Per-row ensemble cumulative hazard (mean of tree Nelson-Aalen curves)."""
        return [average_step_functions(c) for c in self._terminal_curves(X, "chf")]

    def predict_survival(self, X) -> list:
        """Per-row ensemble survival: mean of tree KM curves for bagging,
        ``exp(-mean CHF)`` for a random survival forest."""
        if self.kind == "bagging":
            return [average_step_functions(c) for c in self._terminal_curves(X, "survival")]
        out = []
        for H in self.predict_chf(X):
            out.append(StepFunction(H.knots, np.exp(-H.values), np.exp(-H.left_value)))
        return out

    def mortality(self, X) -> np.ndarray:
        """Ensemble CHF summed over the training event times."""
        X = np.atleast_2d(np.asarray(X, float))
        per_tree = np.array([_tree_mortality(t, self.event_times)[t.apply(X)] for t in self.trees])
        return per_tree.mean(axis=0)

    def to_dict(self):
        return {"trees": [t.to_dict() for t in self.trees], "B": self.B, "mtry": self.mtry,
                "oob_indices": [o.tolist() for o in self.oob_indices], "seed": self.seed,
                "kind": self.kind, "oob_c_index": self.oob_c_index,
                "event_times": self.event_times.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls([SurvivalTree.from_dict(t) for t in d["trees"]], d["B"], d["mtry"],
                   [np.asarray(o, int) for o in d["oob_indices"]], d["seed"], d["kind"],
                   d["oob_c_index"], np.asarray(d["event_times"], float))


def _tree_mortality(tree, grid):
    """Per-node array (terminals only meaningful) of CHF summed over ``grid``."""
    out = np.zeros(len(tree.nodes))
    for k in tree.terminals():
        out[k] = float(np.sum(tree.nodes[k].chf(grid)))
    return out


def _grow_forest(ds, B, mtry, tree_opts, seed, threads, kind, bootstrap=True):
    if B < 1:
        raise ValueError("B must be at least 1")
    tree_opts = dict(tree_opts or {})
    rngs = spawn_generators(seed, B)
    n = ds.n

    def one(b):
        rng = rngs[b]
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        oob = np.setdiff1d(np.arange(n), idx)
        tree = grow_tree(ds.subset(idx), mtry=mtry, rng=rng, **tree_opts)
        return tree, oob

    built = map_ordered(one, range(B), threads)
    trees = [t for t, _ in built]
    oobs = [o for _, o in built]
    event_times = np.unique(ds.time[ds.event])
    forest = Forest(trees, B, mtry, oobs, seed, kind, None, event_times)
    forest.oob_c_index = _oob_c_index(ds, forest)
    return forest


def _oob_c_index(ds, forest):
    total = np.zeros(ds.n)
    count = np.zeros(ds.n)
    for tree, oob in zip(forest.trees, forest.oob_indices):
        if oob.size == 0:
            continue
        mort = _tree_mortality(tree, forest.event_times)
        total[oob] += mort[tree.apply(ds.X[oob])]
        count[oob] += 1
    has = count > 0
    if has.sum() < 2:
        return None
    conc, comp = concordance_counts(ds.time[has], ds.event[has], total[has] / count[has])
    return conc / comp if comp else None


def bagging_fit(ds: SurvivalDataset, B=100, tree_opts=None, seed=0, threads=1,
                bootstrap=True) -> Forest:
    """Bootstrap-aggregated survival trees using every feature at every split.

    ``bootstrap=False`` grows every tree on the full data (a test hook).
    """
    return _grow_forest(ds, B, ds.p, tree_opts, seed, threads, "bagging", bootstrap)


def rsf_fit(ds: SurvivalDataset, B=100, mtry=None, tree_opts=None, seed=0, threads=1) -> Forest:
    """Random survival forest: bootstrap trees with ``mtry`` random features per split
    (default ``ceil(sqrt(p))``); predictions average cumulative hazards."""
    mtry = int(np.ceil(np.sqrt(ds.p))) if mtry is None else int(mtry)
    return _grow_forest(ds, B, mtry, tree_opts, seed, threads, "rsf")


# ---------------------------------------------------------------- boosting

@dataclass
class RegressionTree:
    """Least-squares regression tree stored as parallel arrays."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        node = np.zeros(X.shape[0], dtype=int)
        for _ in range(self.feature.size):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.value[node]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right",
                                                       "value")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature"], int), np.asarray(d["threshold"], float),
                   np.asarray(d["left"], int), np.asarray(d["right"], int),
                   np.asarray(d["value"], float))


def _ls_best_split(X, r, min_leaf):
    n = r.size
    best = (0.0, -1, 0.0)
    total = r.sum()
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], r[order]
        cut = np.flatnonzero(xs[1:] > xs[:-1]) + 1
        cut = cut[(cut >= min_leaf) & (n - cut >= min_leaf)]
        if cut.size == 0:
            continue
        sl = np.cumsum(rs)[cut - 1]
        # SSE reduction of a split: sl^2/nl + sr^2/nr - total^2/n
        gain = sl ** 2 / cut + (total - sl) ** 2 / (n - cut) - total ** 2 / n
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12 * max(1.0, abs(best[0])):
            best = (float(gain[k]), j, 0.5 * (xs[cut[k] - 1] + xs[cut[k]]))
    return best


def fit_regression_tree(X, r, depth=2, min_leaf=5) -> RegressionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def build(idx, d):
        k = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()))
        if d < depth and idx.size >= 2 * min_leaf:
            gain, j, thr = _ls_best_split(X[idx], r[idx], min_leaf)
            if j >= 0 and gain > 0:
                go = X[idx, j] <= thr
                feature[k], threshold[k] = j, thr
                left[k] = build(idx[go], d + 1)
                right[k] = build(idx[~go], d + 1)
        return k

    build(np.arange(r.size), 0)
    return RegressionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value))


@dataclass
class BoostFit:
    baseline: float
    learners: list
    weights: np.ndarray
    m_steps: int
    loss_trace: np.ndarray
    feature_names: tuple = ()

    def predict(self, X):
        """Log-risk score ``F_M(X) = baseline + sum_m w_m f_m(X)``."""
        X = np.atleast_2d(np.asarray(X, float))
        F = np.full(X.shape[0], self.baseline)
        for w, f in zip(self.weights, self.learners):
            F = F + w * f.predict(X)
        return F

    def to_dict(self):
        return {"baseline": self.baseline, "learners": [f.to_dict() for f in self.learners],
                "weights": self.weights.tolist(), "m_steps": self.m_steps,
                "loss_trace": self.loss_trace.tolist(), "feature_names": list(self.feature_names)}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(d["baseline"], [RegressionTree.from_dict(f) for f in d["learners"]],
                   np.asarray(d["weights"], float), d["m_steps"],
                   np.asarray(d["loss_trace"], float), tuple(d["feature_names"]))


def boost_fit(ds: SurvivalDataset, M=100, w=0.1, tree_depth=2, seed=0, subsample=1.0,
              min_leaf=5) -> BoostFit:
    """Gradient boosting of the negative log partial likelihood with LS trees.

    Each step fits a depth-limited least-squares tree to the negative gradient
    with respect to the current predictions; the step weight starts at ``w``
    and is halved (up to 30 times) until the training loss does not increase.
    ``subsample < 1`` fits each tree on a seeded random fraction of subjects.
    """
    if M < 0:
        raise ValueError("M must be non-negative")
    if not 0 < w <= 1:
        raise ValueError("w must lie in (0, 1]")
    rs = CoxRiskSets(ds.time, ds.event)
    rng = np.random.default_rng(seed)
    F = np.zeros(ds.n)
    loss = rs.loss(F)
    trace = [loss]
    learners, weights = [], []
    for _ in range(M):
        _, g = rs.loss_grad(F)
        resid = -g
        idx = (np.arange(ds.n) if subsample >= 1
               else np.sort(rng.choice(ds.n, max(2 * min_leaf, int(subsample * ds.n)), replace=False)))
        tree = fit_regression_tree(ds.X[idx], resid[idx], tree_depth, min_leaf)
        step = tree.predict(ds.X)
        wm = w
        for _ in range(30):
            new = rs.loss(F + wm * step)
            if new <= loss:
                break
            wm *= 0.5
        else:
            wm, new = 0.0, loss
        if wm == 0.0:
            break
        F = F + wm * step
        loss = new
        learners.append(tree)
        weights.append(wm)
        trace.append(loss)
    return BoostFit(0.0, learners, np.array(weights), len(learners), np.array(trace),
                    ds.feature_names)
