"""Seeded data generators: Cox, AFT, competing risks and the illness-death
gamma-frailty process.

Subjects are generated in blocks of ``BLOCK`` with one generator per block
derived from ``SeedSequence([seed, block])``, so the first ``n`` subjects are
identical whatever total size is requested.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import gammaln, logsumexp

from .scr import ScrParameters, baseline_cumhaz, conditional_log_likelihood
from .survdata import IllnessDeathDataset, SurvivalDataset

BLOCK = 1024
KINDS = ("cox", "aft", "competing", "illness_death")
AFT_FAMILIES = ("normal", "extreme_value", "logistic")
PILOT_N = 20_000


@dataclass
class SimSpec:
    """Simulation design.

    ``baseline`` keys by kind: cox ``scale``, ``shape`` (Weibull cumulative
    hazard ``scale * t^shape``); aft ``intercept``, ``sigma``; competing ``p1``
    (cause-1 limiting probability at ``x'beta = 0``) and ``beta2``;
    illness_death ``phi`` (3 x 2). ``censoring`` is ``None`` or a dict with
    ``fraction`` (exponential, rate found by bisection), ``rate`` and/or
    ``admin_time``. ``h`` holds the three illness-death coefficient vectors.
    """

    kind: str = "cox"
    n: int = 100
    p: int = 1
    beta: list | None = None
    family: str = "normal"
    baseline: dict = field(default_factory=dict)
    censoring: dict | None = None
    theta: float = 1.0
    h: list | None = None
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown simulation kind {self.kind!r}")
        if self.kind == "aft" and self.family not in AFT_FAMILIES:
            raise ValueError(f"unknown AFT error family {self.family!r}; use one of {AFT_FAMILIES}")
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be at least 1")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.beta is not None and len(self.beta) != self.p:
            raise ValueError("beta length must equal p")

    def coef(self):
        return np.zeros(self.p) if self.beta is None else np.asarray(self.beta, float)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# building blocks


def _blocks(n, seed, salt=0):
    for b in range((n + BLOCK - 1) // BLOCK):
        size = min(BLOCK, n - b * BLOCK)
        yield size, np.random.default_rng(np.random.SeedSequence([int(seed), salt, b]))


def covariates(n, p, rho=0.0, rng=None):
    """Standard normal covariates, equicorrelated at ``rho``."""
    rng = np.random.default_rng(rng)
    Z = rng.normal(size=(n, p))
    if rho:
        Z = np.sqrt(1 - rho) * Z + np.sqrt(rho) * rng.normal(size=(n, 1))
    return Z


def draw_frailty(theta, size, rng):
    """Gamma frailty with mean 1 and variance ``theta``."""
    return rng.gamma(1.0 / theta, theta, size=size)


def _cox_times(X, spec, rng):
    b = spec.baseline
    scale, shape = float(b.get("scale", 1.0)), float(b.get("shape", 1.0))
    E = rng.exponential(size=X.shape[0])
    return (E / (scale * np.exp(X @ spec.coef()))) ** (1.0 / shape)


def _aft_times(X, spec, rng):
    b = spec.baseline
    n = X.shape[0]
    if spec.family == "normal":
        e = rng.normal(size=n)
    elif spec.family == "extreme_value":
        # log of a unit exponential: minimum extreme-value errors give Weibull times
        e = np.log(rng.exponential(size=n))
    else:
        u = rng.random(n)
        e = np.log(u) - np.log1p(-u)
    return np.exp(float(b.get("intercept", 0.0)) + X @ spec.coef() + float(b.get("sigma", 1.0)) * e)


def _competing_times(X, spec, rng):
    b = spec.baseline
    p1 = float(b.get("p1", 0.5))
    beta2 = np.asarray(b.get("beta2", np.zeros(spec.p)), float)
    n = X.shape[0]
    r1 = np.exp(X @ spec.coef())
    F1_inf = 1.0 - (1.0 - p1) ** r1
    u = rng.random(n)
    v = rng.random(n)
    cause = np.where(u < F1_inf, 1, 2)
    # cause 1: invert F_1(t | x) = 1 - (1 - p1 (1 - e^-t))^r1 on its conditional law
    w = v * F1_inf
    inner = (1.0 - (1.0 - w) ** (1.0 / r1)) / p1
    t1 = -np.log1p(-np.minimum(inner, 1 - 1e-16))
    t2 = rng.exponential(1.0 / np.exp(X @ beta2))
    return np.where(cause == 1, t1, t2), cause


def illness_death_paths(params: ScrParameters, X, rng, gamma=None):
    """Latent times for each row of ``X``: ``t1`` (progression clock),
    ``t2`` (death-without-progression clock), ``sojourn`` and the frailty.
    The subject progresses when ``t1 < t2`` and then dies at ``t1 + sojourn``."""
    X = np.atleast_2d(np.asarray(X, float))
    n = X.shape[0]
    if gamma is None:
        gamma = draw_frailty(params.theta, n, rng)
    eh = np.exp(params.log_risk(X))
    E = rng.exponential(size=(n, 3))
    phi = params.phi
    lat = [(E[:, g] / (gamma * phi[g, 0] * eh[:, g])) ** (1.0 / phi[g, 1]) for g in range(3)]
    return {"t1": lat[0], "t2": lat[1], "sojourn": lat[2], "gamma": gamma}


def _observe_illness_death(paths, C):
    t1, t2, s = paths["t1"], paths["t2"], paths["sojourn"]
    prog = (t1 < t2) & (t1 < C)
    death_time = np.where(t1 < t2, t1 + s, t2)
    y1 = np.where(prog, t1, np.minimum(t2, C))
    y2 = np.where(prog, np.minimum(death_time, C), y1)
    d2 = np.where(prog, death_time <= C, t2 <= C)
    return y1, prog, y2, d2


def _scr_params(spec):
    phi = np.asarray(spec.baseline.get("phi", np.ones((3, 2))), float)
    h = spec.h if spec.h is not None else [np.zeros(spec.p)] * 3
    return ScrParameters(phi, spec.theta, [np.asarray(v, float) for v in h])


def _latent(spec, size, rng):
    X = covariates(size, spec.p, spec.rho, rng)
    if spec.kind == "cox":
        return X, {"T": _cox_times(X, spec, rng)}
    if spec.kind == "aft":
        return X, {"T": _aft_times(X, spec, rng)}
    if spec.kind == "competing":
        T, cause = _competing_times(X, spec, rng)
        return X, {"T": T, "cause": cause}
    return X, illness_death_paths(_scr_params(spec), X, rng)


def _terminal_time(spec, lat):
    if spec.kind != "illness_death":
        return lat["T"]
    return np.where(lat["t1"] < lat["t2"], lat["t1"] + lat["sojourn"], lat["t2"])


def calibrate_censoring_rate(target, spec, tol=1e-4):
    """Exponential censoring rate giving censored fraction ``target``, found by
    bisection on a pilot sample drawn from an independent stream."""
    if not 0 < target < 1:
        raise ValueError("target censoring fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 99]))
    _, lat = _latent(spec, PILOT_N, rng)
    T = _terminal_time(spec, lat)
    E = rng.exponential(size=T.size)
    admin = spec.censoring.get("admin_time") if spec.censoring else None

    def frac(log_rate):
        C = E / np.exp(log_rate)
        if admin is not None:
            C = np.minimum(C, admin)
        return np.mean(C < T)

    lo, hi = -30.0, 30.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return float(np.exp(0.5 * (lo + hi)))


def _censor_times(spec, size, rng, rate):
    C = np.full(size, np.inf)
    if rate:
        C = rng.exponential(1.0 / rate, size=size)
    admin = spec.censoring.get("admin_time") if spec.censoring else None
    if admin is not None:
        C = np.minimum(C, float(admin))
    return C


@dataclass
class CompetingRisksData:
    time: np.ndarray
    cause: np.ndarray     # 0 = censored
    X: np.ndarray

    def as_survival(self, cause=1):
        """Cause-specific view: other causes treated as censored."""
        return SurvivalDataset(self.time, self.cause == cause, self.X)


def simulate(spec: SimSpec, return_latent=False):
    """Draw a dataset from ``spec``.

    Returns a :class:`SurvivalDataset` (cox, aft), :class:`CompetingRisksData`
    or :class:`IllnessDeathDataset`; with ``return_latent`` also the
    uncensored latent quantities.
    """
    rate = 0.0
    cens = spec.censoring or {}
    if "fraction" in cens:
        rate = calibrate_censoring_rate(float(cens["fraction"]), spec)
    elif "rate" in cens:
        rate = float(cens["rate"])
    Xs, lats, Cs = [], [], []
    for size, rng in _blocks(spec.n, spec.seed):
        # full blocks are always drawn so a subject's values do not depend on n
        X, lat = _latent(spec, BLOCK, rng)
        C = _censor_times(spec, BLOCK, rng, rate)
        Xs.append(X[:size])
        lats.append({k: v[:size] for k, v in lat.items()})
        Cs.append(C[:size])
    X = np.vstack(Xs)
    lat = {k: np.concatenate([d[k] for d in lats]) for k in lats[0]}
    C = np.concatenate(Cs)
    names = tuple(f"x{j + 1}" for j in range(spec.p))
    if spec.kind == "illness_death":
        y1, d1, y2, d2 = _observe_illness_death(lat, C)
        out = IllnessDeathDataset(y1, d1, y2, d2, X, names)
        cfrac = float(np.mean(~d2))
    else:
        T = lat["T"]
        event = T <= C
        time = np.minimum(T, C)
        if spec.kind == "competing":
            out = CompetingRisksData(time, np.where(event, lat["cause"], 0), X)
        else:
            out = SurvivalDataset(time, event, X, names)
        cfrac = float(np.mean(~event))
    if spec.censoring and not 0 < cfrac < 1:
        warnings.warn(f"realized censoring fraction is {cfrac:.3f}", stacklevel=2)
    out_lat = dict(lat, C=C, censoring_rate=rate)
    return (out, out_lat) if return_latent else out


def observation_patterns(ds: IllnessDeathDataset):
    """Counts of the four observation patterns (progression observed or not,
    death observed or not)."""
    d1, d2 = ds.d1, ds.d2
    return {"progression_then_death": int(np.sum(d1 & d2)),
            "progression_then_censored": int(np.sum(d1 & ~d2)),
            "death_without_progression": int(np.sum(~d1 & d2)),
            "censored_without_event": int(np.sum(~d1 & ~d2))}


# ---------------------------------------------------------------------------
# quadrature oracle for the marginal likelihood


def laguerre_rule(n_nodes, alpha):
    """Generalized Gauss-Laguerre nodes and weights normalized to sum 1
    (weight function ``x^alpha e^-x``), via the eigen-decomposition of the
    Jacobi matrix; stays finite for very large ``alpha``."""
    i = np.arange(n_nodes, dtype=float)
    diag = 2 * i + alpha + 1
    off = np.sqrt(i[1:] * (i[1:] + alpha))
    x, V = eigh_tridiagonal(diag, off)
    return x, V[0] ** 2


def oracle_quadrature_likelihood(params: ScrParameters, record, n_nodes=64, rate=None):
    """``int L(record | gamma) g(gamma) d gamma`` by generalized Gauss-Laguerre
    quadrature, ``g`` the Gamma(1/theta, 1/theta) density.

    The nodes are placed for the weight ``gamma^(k-1) exp(-c gamma)`` with
    ``k = 1/theta`` and ``c = k + A`` by default (``A`` = total cumulative
    hazard of the record at unit frailty); the remaining integrand ratio is
    evaluated pointwise from the conditional likelihood.
    """
    k = 1.0 / params.theta
    if rate is None:
        x = np.asarray(record.covariates, float)
        eh = np.exp(params.log_risk(x)[0])
        A = (baseline_cumhaz(params.phi[0], record.y1) * eh[0]
             + baseline_cumhaz(params.phi[1], record.y1) * eh[1])
        if record.d1:
            A += baseline_cumhaz(params.phi[2], record.y2 - record.y1) * eh[2]
        rate = k + A
    alpha = k - 1.0
    nodes, w = laguerre_rule(n_nodes, alpha)
    g = nodes / rate
    log_density = k * np.log(k) - gammaln(k) + (k - 1.0) * np.log(g) - k * g
    log_cond = np.array([conditional_log_likelihood(params, record, gi) for gi in g])
    # integral = Gamma(alpha + 1) sum_j w_j h(x_j), h = f(x / c) / (c x^alpha e^-x)
    log_h = log_density + log_cond - np.log(rate) - alpha * np.log(nodes) + nodes
    return float(np.exp(gammaln(alpha + 1.0) + logsumexp(log_h, b=w)))


def spec_to_json(spec: SimSpec):
    return json.dumps(spec.to_dict(), sort_keys=True, default=lambda o: np.asarray(o).tolist())
