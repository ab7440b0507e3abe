import numpy as np
import pytest

from dystonia_bayes.errors import ConfigError, InvalidLayout
from dystonia_bayes.model import ParameterPoint
from dystonia_bayes.sampler import SamplerConfig
from dystonia_bayes.synthetic import (
    TRIAL_LAYOUT,
    SBC_LAYOUT,
    SBC_PRIOR,
    SURROGATE_LAYOUT,
    Layout,
    trial_truth,
    sbc,
    simulate_panel,
)
from dystonia_bayes.trial_data import CovariateSpec, parse_panel, serialize_panel

INTERCEPT = CovariateSpec(("intercept",))


def test_noiseless_intercept_only():
    truth = ParameterPoint(np.array([40.0]), np.zeros(0), 0.0, 1e-9, 1e-9, 1.0)
    sim = simulate_panel(truth, Layout(), seed=0, spec=INTERCEPT)
    assert set(sim.data.scores().tolist()) == {40.0}


def test_full_layout_without_dropout():
    _, truth = trial_truth()
    sim = simulate_panel(truth, Layout(), seed=0)
    assert sim.data.n_rows == 654 and sim.data.n_patients == 109


def test_dropout_calibrated_to_631_rows():
    _, truth = trial_truth()
    sizes = [simulate_panel(truth, TRIAL_LAYOUT, seed=s).data.n_rows for s in range(40)]
    assert abs(np.mean(sizes) - 631) < 3
    assert simulate_panel(truth, SURROGATE_LAYOUT, seed=5).data.n_rows == 631


def test_week0_never_dropped():
    _, truth = trial_truth()
    data = simulate_panel(truth, TRIAL_LAYOUT, seed=3).data
    assert sum(r.week == 0 for r in data.records) == 109


def test_deterministic_and_round_trips():
    _, truth = trial_truth()
    a = simulate_panel(truth, TRIAL_LAYOUT, seed=9)
    b = simulate_panel(truth, TRIAL_LAYOUT, seed=9)
    assert serialize_panel(a.data) == serialize_panel(b.data)
    np.testing.assert_array_equal(a.latent, b.latent)
    assert parse_panel(serialize_panel(a.data)).records == a.data.records


def test_clamping_is_rare_at_trial_truth():
    _, truth = trial_truth()
    sim = simulate_panel(truth, TRIAL_LAYOUT, seed=1)
    assert sim.n_clamped < 0.01 * sim.data.n_rows


def test_sites_balanced_within_arm():
    _, truth = trial_truth()
    data = simulate_panel(truth, SURROGATE_LAYOUT, seed=1).data
    per_arm = {}
    for r in data.records:
        per_arm.setdefault(r.arm, {})[r.patient_id] = r.site
    for sites in per_arm.values():
        counts = np.bincount(list(sites.values()), minlength=10)[1:]
        assert counts.max() - counts.min() <= 1


def test_male_counts_per_arm():
    _, truth = trial_truth()
    data = simulate_panel(truth, SURROGATE_LAYOUT, seed=2).data
    men = {}
    for r in data.records:
        if r.sex.value == "M":
            men.setdefault(r.arm.label, set()).add(r.patient_id)
    assert {k: len(v) for k, v in men.items()} == {"Placebo": 19, "U5000": 13, "U10000": 7}


def test_same_patient_covariance_matches_sigma_gamma():
    truth = ParameterPoint(np.array([40.0]), np.zeros(0), 0.0, 3.0, 5.0, 1.0)
    layout = Layout(arm_counts=(1000, 1000, 1000), schedule=(0, 2))
    sim = simulate_panel(truth, layout, seed=4, spec=INTERCEPT)
    y = sim.latent.reshape(-1, 2)
    cov = np.cov(y[:, 0], y[:, 1])[0, 1]
    assert abs(cov - 9.0) < 0.1 * 9.0


@pytest.mark.parametrize("kwargs", [
    dict(arm_counts=(1, 2)), dict(arm_counts=(0, 0, 0)), dict(schedule=(2, 4)),
    dict(n_sites=10), dict(dropout=0.9), dict(male_counts=(40, 0, 0)),
])
def test_invalid_layouts(kwargs):
    with pytest.raises(InvalidLayout):
        Layout(**kwargs)


def test_truth_dimension_mismatch():
    _, truth = trial_truth()
    with pytest.raises(InvalidLayout):
        simulate_panel(truth, Layout(), seed=0, spec=INTERCEPT)


def test_sbc_requires_twenty_replications():
    with pytest.raises(ConfigError):
        sbc(SBC_PRIOR, SBC_LAYOUT, 19, SamplerConfig(seed=1, chains=1, iterations=200))


def test_sbc_small_run_structure():
    res = sbc(SBC_PRIOR, SBC_LAYOUT, 20, SamplerConfig(seed=1, chains=1, iterations=400, burn_in=100))
    assert res.ranks.shape == (20, 8)
    assert res.histograms.sum(axis=1).tolist() == [20] * 8
    assert 0 <= res.p_value <= 1
    assert res.ranks.max() <= 199
