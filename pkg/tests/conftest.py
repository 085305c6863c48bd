import numpy as np
import pytest

from hdsurv.survdata import SurvivalDataset


def make_cox_data(n, beta, seed, censor_rate=0.3, ties_round=None):
    """Exponential-baseline Cox data with independent exponential censoring."""
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    X = rng.normal(size=(n, beta.size))
    T = rng.exponential(size=n) / np.exp(X @ beta)
    C = rng.exponential(1.0 / censor_rate, size=n) if censor_rate > 0 else np.full(n, np.inf)
    Y = np.minimum(T, C)
    if ties_round is not None:
        Y = np.round(Y, ties_round) + 10.0 ** -ties_round
    return SurvivalDataset(Y, T <= C, X)


@pytest.fixture
def cox_data():
    return make_cox_data


# acceptance bookkeeping: (criterion, part, passed, detail) in execution order
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    by = {}
    for crit, part, ok, detail in ACCEPTANCE:
        by.setdefault(crit, []).append((part, ok, detail))
    for crit in sorted(by):
        parts = by[crit]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        tr.write_line(f"{status} criterion {crit}: " + "; ".join(
            f"{part} {'ok' if ok else 'FAIL'} ({detail})" for part, ok, detail in parts))
