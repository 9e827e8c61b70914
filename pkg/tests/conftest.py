import numpy as np
import pytest

from smartlmm.design import DtrIndex
from smartlmm.estimator import AugmentedData, PatternGroup
from smartlmm.simulator import generate_potential_outcomes, observe, simulation1_config
from smartlmm.design import symmetric_design
from smartlmm.model import symmetric_mean_model

# Lines reported by tests/test_acceptance.py, printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_groups(rng, n_subjects=12, times=(0.0, 1.0, 2.5), p=3, max_weight=3, weights=None):
    """Hand-built augmented data: one replicate per subject, random X, Y and weights.

    Returns (AugmentedData, integer weights).
    """
    times = np.asarray(times, dtype=float)
    n = len(times)
    X = rng.normal(size=(n_subjects, n, p))
    X[:, :, 0] = 1.0
    Y = X @ rng.normal(size=p) + rng.normal(size=(n_subjects, 1)) + rng.normal(size=(n_subjects, n))
    w = rng.integers(1, max_weight + 1, size=n_subjects).astype(float) if weights is None else np.asarray(weights, float)
    g = PatternGroup(times, X, Y, w, np.arange(n_subjects), np.zeros(n_subjects, dtype=int))
    names = tuple(f"x{j}" for j in range(p))
    return AugmentedData([g], [str(i) for i in range(n_subjects)], (DtrIndex(1, None),), names), w


def replicate_rows(data: AugmentedData, w):
    """Same data with replicate i physically repeated w_i times at weight 1."""
    g = data.groups[0]
    idx = np.repeat(np.arange(len(w)), w.astype(int))
    rep = PatternGroup(g.times, g.X[idx], g.Y[idx], np.ones(len(idx)), np.arange(len(idx)), np.zeros(len(idx), dtype=int))
    return AugmentedData([rep], [str(i) for i in range(len(idx))], data.dtrs, data.column_names)


@pytest.fixture(scope="session")
def sim1_small():
    """Simulation-1 observed data, N=400, shared across tests."""
    cfg = simulation1_config(0.8)
    rng = np.random.default_rng(11)
    pot = generate_potential_outcomes(cfg, 400, rng)
    obs = observe(pot, symmetric_design(), rng)
    return cfg, obs


@pytest.fixture(scope="session")
def sim1_aug(sim1_small):
    cfg, obs = sim1_small
    return obs.augmented(symmetric_design(), symmetric_mean_model())
