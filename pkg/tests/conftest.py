import numpy as np
import pytest

from dystonia_bayes.model import ParameterPoint, default_prior
from dystonia_bayes.pipeline import build_model
from dystonia_bayes.synthetic import Layout, trial_truth, simulate_panel
from dystonia_bayes.trial_data import FINAL_SPEC, load_bundled_panel

SMALL_LAYOUT = Layout(arm_counts=(5, 5, 6), schedule=(0, 2, 4, 8), n_sites=3)


@pytest.fixture(scope="session")
def bundled():
    return load_bundled_panel()


@pytest.fixture(scope="session")
def small_panel():
    _, truth = trial_truth()
    return simulate_panel(truth, SMALL_LAYOUT, seed=11).data


@pytest.fixture(scope="session")
def small_model(small_panel):
    return build_model(small_panel, FINAL_SPEC, default_prior())


@pytest.fixture
def small_point(small_model):
    rng = np.random.default_rng(5)
    K, P = small_model.n_coef, small_model.n_patients
    return ParameterPoint(beta=rng.normal(0, 3, K), gamma=rng.normal(0, 2, P), mu_beta=0.5,
                          sigma_gamma=2.5, sigma_score=11.0, tau_beta=0.02)


@pytest.fixture(scope="session")
def trial_panel(bundled):
    """The original trial file when CDYSTONIA_CSV points at it, else the bundled panel."""
    import os

    from dystonia_bayes.trial_data import read_panel

    path = os.environ.get("CDYSTONIA_CSV")
    return read_panel(path) if path else bundled


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
