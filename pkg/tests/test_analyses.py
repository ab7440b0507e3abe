import numpy as np
import pytest

from dystonia_bayes.analyses import (
    GroupPosteriors,
    contrast,
    group_mean_posteriors,
    pairwise_contrasts,
    relative_change,
    sensitivity_analysis,
)
from dystonia_bayes.errors import SpecMismatch
from dystonia_bayes.model import ParameterPoint
from dystonia_bayes.synthetic import Layout, simulate_panel
from dystonia_bayes.pipeline import fit
from dystonia_bayes.sampler import SamplerConfig, TraceStore, parameter_names
from dystonia_bayes.pipeline import build_model
from dystonia_bayes.trial_data import FINAL_SPEC, CovariateSpec, parse_panel

FAST = SamplerConfig(seed=3, chains=2, iterations=1000, burn_in=200)


def _fake_trace(model, beta, gamma=None, draws=200):
    names = parameter_names(model)
    arr = np.zeros((2, draws, len(names)))
    arr[:, :, : len(beta)] = beta
    if gamma is not None:
        arr[:, :, len(beta) + 4:] = gamma
    return TraceStore(names, arr, tuple(model.design.columns))


def test_intercept_only_draws_give_constant_arm_means(small_panel):
    model = build_model(small_panel, FINAL_SPEC)
    beta = np.zeros(model.n_coef)
    beta[0] = 42.0
    for mode in ("observed", "reference"):
        g = group_mean_posteriors(_fake_trace(model, beta), small_panel, FINAL_SPEC, mode=mode)
        assert set(g.groups) == {"Placebo", "U5000", "U10000"}
        for draws in g.draws.values():
            np.testing.assert_allclose(draws, 42.0)


def test_observed_mean_includes_random_intercepts(small_panel):
    model = build_model(small_panel, FINAL_SPEC)
    gamma = np.arange(model.n_patients, dtype=float)
    g = group_mean_posteriors(_fake_trace(model, np.zeros(model.n_coef), gamma), small_panel, FINAL_SPEC)
    pid = model.design.patient_of_row
    arms = np.array([r.arm.label for r in small_panel.records])
    for label, draws in g.draws.items():
        np.testing.assert_allclose(draws, gamma[pid[arms == label]].mean())


def test_single_arm_dataset():
    head = "id,week,site,treat,age,sex,twstrs\n"
    data = parse_panel(head + "1,0,1,Placebo,50,F,30\n1,2,1,Placebo,50,F,28\n2,0,2,Placebo,60,M,35\n")
    spec = CovariateSpec(("intercept", "week"))
    model = build_model(data, spec)
    g = group_mean_posteriors(_fake_trace(model, np.array([1.0, 0.0])), data, spec)
    assert g.groups == ("Placebo",)
    assert pairwise_contrasts(g) == []


def test_spec_mismatch(small_panel):
    model = build_model(small_panel, FINAL_SPEC)
    with pytest.raises(SpecMismatch):
        group_mean_posteriors(_fake_trace(model, np.zeros(model.n_coef)), small_panel,
                              CovariateSpec(("intercept", "week")))


def test_self_contrast():
    x = np.random.default_rng(0).normal(size=(2, 500))
    c = contrast(x, x, "a", "a")
    assert c.median == 0 and c.lower == 0 and c.upper == 0 and c.p_tie == 1.0


def test_shift_contrast():
    x = np.random.default_rng(1).normal(size=(2, 500))
    c = contrast(x + 2.5, x, "a", "b")
    assert c.median == pytest.approx(2.5) and c.upper - c.lower == pytest.approx(0, abs=1e-12)
    assert not c.contains_zero


def test_antisymmetry_and_probabilities():
    rng = np.random.default_rng(2)
    a, b = rng.normal(0.3, 1, (2, 400)), rng.normal(0, 1, (2, 400))
    ab, ba = contrast(a, b, "a", "b"), contrast(b, a, "b", "a")
    assert ab.median == pytest.approx(-ba.median)
    assert (ab.lower, ab.upper) == pytest.approx((-ba.upper, -ba.lower))
    assert ab.p_less == ba.p_greater
    assert ab.p_less + ab.p_greater + ab.p_tie == pytest.approx(1.0)


def test_default_pairs():
    rng = np.random.default_rng(3)
    g = GroupPosteriors({k: rng.normal(size=(1, 100)) for k in ("Placebo", "U5000", "U10000")}, {}, "observed")
    pairs = [(c.group, c.reference) for c in pairwise_contrasts(g)]
    assert pairs == [("U5000", "Placebo"), ("U10000", "Placebo"), ("U10000", "U5000")]


def test_relative_change_symmetry():
    assert relative_change(1.0, 1.1) == relative_change(1.1, 1.0)
    assert relative_change(3.0, 3.0) == 0
    assert relative_change(0.0, 0.0) == 0


def test_sensitivity_on_strong_signal():
    spec = CovariateSpec(("intercept", "treatment", "week", "sex"))
    truth = ParameterPoint(np.array([60.0, -8.0, -1.0, -12.0]), np.zeros(0), 0.0, 2.0, 4.0, 1.0)
    data = simulate_panel(truth, Layout(arm_counts=(20, 20, 20)), 7, spec).data
    report = sensitivity_analysis(data, spec, FAST)
    assert report.presets == ("VeryWeak", "Weak", "Moderate")
    assert report.max_relative_change["treatment"] < 0.05
    assert set(report.flagged) == {k for k, v in report.max_relative_change.items() if v > 0.05}


def test_repeat_fit_gives_zero_change(small_panel):
    a = fit(small_panel, FINAL_SPEC, FAST)
    b = fit(small_panel, FINAL_SPEC, FAST)
    assert all(relative_change(a.summary[k].median, b.summary[k].median) == 0 for k in a.summary)
