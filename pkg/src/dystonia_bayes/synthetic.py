"""Simulate trial panels at known parameters and run simulation-based calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .errors import ConfigError, InvalidLayout, SamplerError
from .model import ModelDefinition, ParameterPoint, PriorConfig
from .sampler import SamplerConfig, _gamma_draw, derive_seed, run_chains
from .trial_data import (
    ARMS,
    FINAL_SPEC,
    SCHEDULE,
    SCORE_RANGE,
    CovariateSpec,
    ObservationRecord,
    PanelDataset,
    Sex,
    encode_design,
    from_records,
)


@dataclass(frozen=True)
class Layout:
    """Trial layout for simulation.

    ``dropout`` is the expected fraction of all scheduled visits that are
    missing; visits are dropped independently, never at week 0. With
    ``exact_missing`` exactly ``round(dropout * scheduled)`` post-baseline
    visits are removed instead, chosen uniformly at random. When
    ``male_counts`` is given it fixes the number of men per arm, otherwise
    each patient is male with probability ``male_fraction``. With
    ``stratify_sites`` every arm is spread as evenly as possible over the
    sites (randomization within site); otherwise sites are drawn
    independently of arm.
    """

    arm_counts: tuple = (36, 36, 37)
    schedule: tuple = SCHEDULE
    n_sites: int = 9
    stratify_sites: bool = True
    dropout: float = 0.0
    exact_missing: bool = False
    male_fraction: float = 0.36
    male_counts: Optional[tuple] = None
    age_mean: float = 55.6
    age_sd: float = 12.0
    age_range: tuple = (20, 85)

    def __post_init__(self):
        if len(self.arm_counts) != len(ARMS) or any(c < 0 for c in self.arm_counts):
            raise InvalidLayout("arm_counts needs one non-negative count per arm")
        if sum(self.arm_counts) < 1:
            raise InvalidLayout("layout has no patients")
        if not self.schedule or self.schedule[0] != 0 or any(w not in SCHEDULE for w in self.schedule):
            raise InvalidLayout(f"schedule must start at week 0 and use weeks from {SCHEDULE}")
        if not 1 <= self.n_sites <= 9:
            raise InvalidLayout("n_sites must be between 1 and 9")
        if len(self.schedule) > 1:
            drop_max = (len(self.schedule) - 1) / len(self.schedule)
        else:
            drop_max = 0.0
        if not 0.0 <= self.dropout <= drop_max:
            raise InvalidLayout(f"dropout must lie in [0, {drop_max:.3f}]")
        if self.male_counts is not None:
            if len(self.male_counts) != len(ARMS) or any(
                not 0 <= m <= n for m, n in zip(self.male_counts, self.arm_counts)
            ):
                raise InvalidLayout("male_counts must give 0..n men for each arm")
        elif not 0.0 <= self.male_fraction <= 1.0:
            raise InvalidLayout("male_fraction must lie in [0, 1]")

    @property
    def n_patients(self) -> int:
        return int(sum(self.arm_counts))

    @property
    def visit_drop_probability(self) -> float:
        later = len(self.schedule) - 1
        return self.dropout * len(self.schedule) / later if later else 0.0


TRIAL_LAYOUT = Layout(dropout=0.035, male_counts=(19, 13, 7))
# Same layout with exactly 23 of 654 visits missing (631 rows, as in the trial file).
SURROGATE_LAYOUT = Layout(dropout=0.035, exact_missing=True, male_counts=(19, 13, 7))

# Final-model posterior medians reported for the trial; used as simulation truth.
TRIAL_TRUTH_BETA = {
    "intercept": 71.2967,
    "treatment": -2.3940,
    "week": -1.3611,
    "week_sq": 0.0595,
    "sex": -14.0381,
    "site": -2.6204,
}
TRIAL_TRUTH_SIGMA_GAMMA = 2.5556
TRIAL_TRUTH_SIGMA_SCORE = 12.0214


def trial_truth() -> tuple:
    """(spec, truth) for simulating at the published final-model estimates."""
    beta = np.array([TRIAL_TRUTH_BETA[t] for t in FINAL_SPEC.terms])
    point = ParameterPoint(
        beta=beta, gamma=np.zeros(0), mu_beta=float(beta.mean()),
        sigma_gamma=TRIAL_TRUTH_SIGMA_GAMMA, sigma_score=TRIAL_TRUTH_SIGMA_SCORE,
        tau_beta=float(1.0 / beta.var()),
    )
    return FINAL_SPEC, point


@dataclass(frozen=True)
class SimulatedPanel:
    data: PanelDataset
    latent: np.ndarray
    gamma: np.ndarray
    n_clamped: int


def _layout_patients(layout: Layout, rng: np.random.Generator):
    arms = np.repeat(np.arange(len(ARMS)), layout.arm_counts)
    male = np.zeros(arms.size, dtype=bool)
    if layout.male_counts is not None:
        for a, m in enumerate(layout.male_counts):
            members = np.flatnonzero(arms == a)
            male[rng.choice(members, size=m, replace=False)] = True
    else:
        male = rng.random(arms.size) < layout.male_fraction
    order = rng.permutation(arms.size)
    arms, male = arms[order], male[order]
    if layout.stratify_sites:
        sites = np.empty(arms.size, dtype=int)
        for a in range(len(ARMS)):
            members = np.flatnonzero(arms == a)
            balanced = np.resize(rng.permutation(layout.n_sites) + 1, members.size)
            sites[members] = rng.permutation(balanced)
    else:
        sites = rng.integers(1, layout.n_sites + 1, size=arms.size)
    lo, hi = layout.age_range
    ages = np.clip(np.rint(rng.normal(layout.age_mean, layout.age_sd, size=arms.size)), lo, hi).astype(int)
    return arms, male, sites, ages


def _skeleton(layout: Layout, rng: np.random.Generator) -> list:
    arms, male, sites, ages = _layout_patients(layout, rng)
    n_later = arms.size * (len(layout.schedule) - 1)
    if layout.exact_missing:
        n_drop = int(round(layout.dropout * arms.size * len(layout.schedule)))
        dropped = np.zeros(n_later, dtype=bool)
        dropped[rng.choice(n_later, size=min(n_drop, n_later), replace=False)] = True
    else:
        dropped = rng.random(n_later) < layout.visit_drop_probability
    dropped = dropped.reshape(arms.size, len(layout.schedule) - 1)
    records = []
    for i in range(arms.size):
        for v, week in enumerate(layout.schedule):
            if v > 0 and dropped[i, v - 1]:
                continue
            records.append(ObservationRecord(
                patient_id=str(i + 1), week=int(week), site=int(sites[i]), arm=ARMS[arms[i]],
                age=int(ages[i]), sex=Sex.MALE if male[i] else Sex.FEMALE, score=0,
            ))
    return records


def simulate_panel(truth: ParameterPoint, layout: Layout, seed: int,
                   spec: CovariateSpec = FINAL_SPEC) -> SimulatedPanel:
    """Simulate a panel whose fixed effects follow ``spec`` with coefficients ``truth.beta``.

    Scores are rounded to integers and clamped to the 0-87 scale; the
    unrounded values are returned as ``latent``.
    """
    if truth.sigma_gamma <= 0 or truth.sigma_score <= 0:
        raise InvalidLayout("truth sigmas must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    records = _skeleton(layout, rng)
    skeleton = from_records(records)
    design = encode_design(skeleton, spec)
    beta = np.asarray(truth.beta, float)
    if beta.size != design.values.shape[1]:
        raise InvalidLayout(f"truth has {beta.size} coefficients, spec encodes {design.values.shape[1]}")
    gamma = truth.sigma_gamma * rng.standard_normal(skeleton.n_patients)
    latent = design.values @ beta + gamma[design.patient_of_row]
    latent = latent + truth.sigma_score * rng.standard_normal(latent.size)
    rounded = np.rint(latent)
    clipped = np.clip(rounded, *SCORE_RANGE)
    n_clamped = int(np.count_nonzero(clipped != rounded))
    final = [
        ObservationRecord(r.patient_id, r.week, r.site, r.arm, r.age, r.sex, int(s))
        for r, s in zip(records, clipped)
    ]
    return SimulatedPanel(from_records(final), latent, gamma, n_clamped)


def latent_model(sim: SimulatedPanel, spec: CovariateSpec, prior: PriorConfig) -> ModelDefinition:
    """Model on the unrounded simulated scores, for exact calibration checks."""
    return ModelDefinition(encode_design(sim.data, spec), prior, sim.latent)


# --------------------------------------------------------------------------
# Simulation-based calibration
# --------------------------------------------------------------------------

SBC_PRIOR = PriorConfig(
    mu_beta_mean=0.0, mu_beta_precision=0.01,
    sigma_gamma_upper=50.0, sigma_score_upper=50.0,
    tau_beta_shape=2.0, tau_beta_rate=2.0,
)
SBC_LAYOUT = Layout(arm_counts=(13, 13, 14), schedule=(0, 4, 8, 16))
SBC_SPEC = CovariateSpec(("intercept", "treatment", "week", "sex"))


def draw_from_prior(prior: PriorConfig, n_coef: int, rng: np.random.Generator) -> ParameterPoint:
    mu = prior.mu_beta_mean + rng.standard_normal() / math.sqrt(prior.mu_beta_precision)
    tau = prior.fixed_tau_beta or _gamma_draw(prior.tau_beta_shape, prior.tau_beta_rate, rng)
    beta = mu + rng.standard_normal(n_coef) / math.sqrt(tau)
    s_gamma = prior.fixed_sigma_gamma or rng.uniform(0, prior.sigma_gamma_upper)
    s_score = prior.fixed_sigma_score or rng.uniform(0, prior.sigma_score_upper)
    return ParameterPoint(beta, np.zeros(0), float(mu), float(s_gamma), float(s_score), float(tau))


@dataclass(frozen=True)
class SBCResult:
    parameters: tuple
    ranks: np.ndarray          # (replications, parameters)
    n_rank_draws: int
    histograms: np.ndarray     # (parameters, bins)
    p_values: dict
    p_value: float             # Bonferroni-combined over parameters

    def as_dict(self) -> dict:
        return {
            "parameters": list(self.parameters),
            "n_rank_draws": self.n_rank_draws,
            "histograms": {p: self.histograms[k].tolist() for k, p in enumerate(self.parameters)},
            "p_values": dict(self.p_values),
            "p_value": self.p_value,
            "replications": int(self.ranks.shape[0]),
        }


def sbc(truth_prior: PriorConfig, layout: Layout, replications: int, sampler_config: SamplerConfig,
        spec: CovariateSpec = SBC_SPEC, bins: int = 20, rank_draws: int = 199) -> SBCResult:
    """Rank truths drawn from ``truth_prior`` within their posteriors.

    ``rank_draws`` posterior draws (evenly thinned) are used per replication,
    so ranks take ``rank_draws + 1`` values; ``(rank_draws + 1)`` should be a
    multiple of ``bins``.
    """
    if replications < 20:
        raise ConfigError(f"SBC needs at least 20 replications, got {replications}")
    if (rank_draws + 1) % bins:
        raise ConfigError("rank_draws + 1 must be a multiple of bins")
    n_coef = len(encode_design(from_records(_skeleton(layout, np.random.default_rng(0))), spec).columns)
    names = None
    all_ranks = []
    for r in range(replications):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(sampler_config.seed), spawn_key=(r, 0))))
        truth = draw_from_prior(truth_prior, n_coef, rng)
        sim = simulate_panel(truth, layout, derive_seed(sampler_config.seed, r, 1), spec)
        model = latent_model(sim, spec, truth_prior)
        cfg = SamplerConfig(
            seed=derive_seed(sampler_config.seed, r, 2), chains=sampler_config.chains,
            iterations=sampler_config.iterations, burn_in=sampler_config.burn_in,
            thin=sampler_config.thin, init=sampler_config.init,
            collapse_gamma=sampler_config.collapse_gamma, store_gamma=False,
            frozen=sampler_config.frozen,
        )
        try:
            trace = run_chains(model, cfg)
        except SamplerError as err:
            raise type(err)(f"SBC replication {r}: {err}", sweep=err.sweep, chain_id=err.chain_id) from err
        if names is None:
            names = tuple(model.design.columns) + ("mu_beta", "tau_beta", "sigma_score", "sigma_gamma")
        truth_values = dict(zip(model.design.columns, truth.beta))
        truth_values.update(mu_beta=truth.mu_beta, tau_beta=truth.tau_beta,
                            sigma_score=truth.sigma_score, sigma_gamma=truth.sigma_gamma)
        ranks = []
        for name in names:
            draws = trace.pooled(name)
            if draws.size < rank_draws:
                raise ConfigError(f"need at least {rank_draws} retained draws for SBC ranks")
            idx = np.linspace(0, draws.size - 1, rank_draws).round().astype(int)
            ranks.append(int(np.count_nonzero(draws[idx] < truth_values[name])))
        all_ranks.append(ranks)
    ranks = np.asarray(all_ranks)
    per_bin = (rank_draws + 1) // bins
    hist = np.stack([np.bincount(ranks[:, k] // per_bin, minlength=bins) for k in range(len(names))])
    p_values = {name: float(stats.chisquare(hist[k]).pvalue) for k, name in enumerate(names)}
    combined = min(1.0, min(p_values.values()) * len(names))
    return SBCResult(names, ranks, rank_draws, hist, p_values, combined)
