"""Bayesian random-intercept regression for longitudinal TWSTRS trial panels."""
from .analyses import (
    group_mean_posteriors,
    pairwise_contrasts,
    relative_change,
    sensitivity_analysis,
)
from .diagnostics import ess, geweke, kde, split_rhat, summarize, summarize_draws
from .errors import DegenerateSS, SamplerError, SingularSystem, ValidationError
from .model import ModelDefinition, ParameterPoint, PriorConfig, default_prior, log_posterior, sensitivity_presets
from .pipeline import Fit, build_model, fit
from .sampler import SamplerConfig, TraceStore, derive_seed, run_chain, run_chains
from .selection import backward_select, compare_sigma_densities, overlap_coefficient
from .synthetic import Layout, trial_truth, sbc, simulate_panel
from .trial_data import (
    FINAL_SPEC,
    FULL_SPEC,
    Arm,
    CovariateSpec,
    PanelDataset,
    Sex,
    baseline_summary,
    encode_design,
    load_bundled_panel,
    parse_panel,
    read_panel,
)

__version__ = "0.1.0"
