import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dybm.core import DybmModel, ModelConfig, Parameters  # noqa: E402


def make_model(n, seed=0, scale=0.3, delay_min=1, delay_max=7, k=3, l=3, decays=None):
    """Model with N(0, scale) parameters and random delays, built without init_model."""
    rng = np.random.default_rng(seed)
    lam = tuple(rng.uniform(0.1, 0.9, size=k)) if decays is None else decays[0]
    mu = tuple(rng.uniform(0.1, 0.9, size=l)) if decays is None else decays[1]
    cfg = ModelConfig(n_units=n, n_synaptic_traces=k, n_neural_traces=l,
                      synaptic_decays=lam, neural_decays=mu,
                      delay_min=delay_min, delay_max=delay_max, rng_seed=seed)
    params = Parameters(rng.normal(0, scale, n), rng.normal(0, scale, (n, n, k)),
                        rng.normal(0, scale, (n, n, l)))
    delays = rng.integers(delay_min, delay_max + 1, size=(n, n))
    return DybmModel(cfg, params, delays)


def random_steps(rng, t, n, density=0.5):
    return (rng.random((t, n)) < density).astype(float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
