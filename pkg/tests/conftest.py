import numpy as np
import pytest

from svn_ensembles.nn import MlpArchitecture, init_params


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_jacobian(f, x, h=1e-5):
    """Jacobian of a vector function, rows are outputs."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


HEAD_OUTPUTS = {"gaussian_regression": 2, "homoscedastic_regression": 1, "binary_classification": 1, "multiclass": 3}


def random_net(rng, head="gaussian_regression", max_params=50, activation="tanh"):
    """A random small MLP with at most ``max_params`` parameters and random parameters."""
    k = HEAD_OUTPUTS[head]
    while True:
        n_in = int(rng.integers(1, 4))
        hidden = [int(h) for h in rng.integers(1, 6, size=int(rng.integers(0, 3)))]
        arch = MlpArchitecture((n_in, *hidden, k), activation, head)
        if arch.n_params <= max_params:
            break
    params = init_params(arch, rng) + 0.3 * rng.standard_normal(arch.n_params)
    return arch, params


def random_targets(rng, head, b):
    if head in ("gaussian_regression", "homoscedastic_regression"):
        return rng.standard_normal(b)
    if head == "binary_classification":
        return rng.integers(0, 2, b).astype(np.float64)
    return rng.integers(0, HEAD_OUTPUTS[head], b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
