import sys

import numpy as np
import pytest
from hypothesis import settings
from scipy.special import expit

from ctmle import Dataset

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def make_binary(n=300, seed=0, p=3, effect=1.0, strength=1.0):
    """Logistic treatment, linear Normal outcome; raw outcome scale."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, p))
    a = rng.binomial(1, expit(strength * w[:, 0] - 0.5 * w[:, 1]))
    y = effect * a + w @ np.linspace(1.0, 0.2, p) + rng.normal(size=n)
    return Dataset.from_raw(w, a, y)


@pytest.fixture
def binary_ds():
    return make_binary()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
