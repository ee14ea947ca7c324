import numpy as np
import pytest


def random_subintensity(rng, p, scale=1.0):
    """Dense random sub-intensity matrix with strictly positive exit rates."""
    T = rng.uniform(size=(p, p)) * scale
    np.fill_diagonal(T, 0.0)
    np.fill_diagonal(T, -(T.sum(axis=1) + rng.uniform(0.1, 1.0, size=p) * scale))
    return T


def random_alpha(rng, p):
    a = rng.uniform(size=p)
    return a / a.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def ks_bounds(x, model, n_grid=4000):
    """Lower and upper bounds on the KS distance between a sample and ``model``.

    The model CDF is evaluated only at about ``n_grid`` order statistics.
    Between two evaluated points the CDF is bracketed by its values there,
    which bounds the empirical-vs-model gap on every sample point.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    idx = np.unique(np.linspace(0, n - 1, min(n_grid, n)).astype(np.int64))
    F = -np.expm1(model.log_survival(x[idx]))
    # exact KS terms at the evaluated points
    lower = max(np.max((idx + 1) / n - F), np.max(F - idx / n))
    # between idx[j] and idx[j+1]: F(x_k) in [F_j, F_{j+1}]
    upper = lower
    for j in range(idx.size - 1):
        a, b = idx[j], idx[j + 1]
        if b - a > 1:
            upper = max(upper, b / n - F[j], F[j + 1] - (a + 1) / n)
    return float(lower), float(upper)


ACCEPTANCE_LINES = []


def report(number, title, ok, detail):
    """Record one acceptance line; printed again in the terminal summary."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"{status} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
