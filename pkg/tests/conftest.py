import numpy as np
import pytest

from metainfluence.metalearn import Learner, MetaParams
from metainfluence.model import Batch, MlpSpec


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), floor)


def fd_gradient(f, w, step_scale=1e-4):
    """Central finite differences of a scalar function of a flat vector."""
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    for j in range(w.size):
        h = step_scale * (1.0 + abs(w[j]))
        wp = w.copy()
        wp[j] += h
        wm = w.copy()
        wm[j] -= h
        g[j] = (f(wp) - f(wm)) / (2.0 * h)
    return g


def random_batch(rng, n, spec):
    return Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, n))


def random_net(rng, widths=(5, 7, 4), activation="tanh", jitter=0.3):
    spec = MlpSpec(widths, activation)
    w = spec.init_weights(rng) + jitter * rng.normal(size=spec.num_params)
    return spec, w


def make_params(rng, widths=(6, 5, 3), kind="maml", inner_lr=0.05, jitter=0.2):
    spec = MlpSpec(widths)
    learner = Learner(kind, spec, inner_lr)
    omega = spec.init_weights(rng) + jitter * rng.normal(size=spec.num_params)
    return MetaParams(omega, learner)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full acceptance-criteria runs (minutes)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion" in nodeid and report.when == "call":
                name = nodeid.split("::")[-1]
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append(f"{verdict}  {name}")
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("_criterion_")[-1]):
            terminalreporter.write_line(line)
