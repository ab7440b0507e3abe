"""Prior sensitivity, posterior arm means and pairwise arm contrasts."""
from __future__ import annotations

import warnings

from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .diagnostics import summarize_draws
from .errors import SpecMismatch
from .model import PriorConfig, sensitivity_presets
from .pipeline import fit
from .sampler import SamplerConfig, TraceStore
from .trial_data import ARMS, CovariateSpec, PanelDataset, encode_design, from_records

REL_EPS = 1e-6
STABILITY_THRESHOLD = 0.05


def relative_change(a: float, b: float, eps: float = REL_EPS) -> float:
    return abs(a - b) / max(abs(a), abs(b), eps)


@dataclass
class SensitivityReport:
    presets: tuple
    medians: dict          # parameter -> {preset: median}
    max_relative_change: dict
    flagged: list
    summaries: dict = field(default_factory=dict)   # preset -> {parameter: ParamSummary}

    def as_dict(self) -> dict:
        return {
            "presets": list(self.presets),
            "threshold": STABILITY_THRESHOLD,
            "parameters": {
                name: {"medians": self.medians[name], "max_relative_change": self.max_relative_change[name],
                       "flagged": name in self.flagged}
                for name in self.medians
            },
            "flagged": list(self.flagged),
        }


def sensitivity_analysis(data: PanelDataset, spec: CovariateSpec, sampler_config: SamplerConfig,
                         base_prior: Optional[PriorConfig] = None, workers: int = 1) -> SensitivityReport:
    """Refit under each prior-strength preset (same seed) and compare coefficient medians."""
    presets = sensitivity_presets(base_prior)
    summaries = {}
    columns = None
    for name, prior in presets.items():
        f = fit(data, spec, sampler_config, prior, workers=workers)
        summaries[name] = f.summary
        columns = f.model.design.columns
    medians = {c: {p: summaries[p][c].median for p in presets} for c in columns}
    max_change = {}
    for c, by_preset in medians.items():
        values = list(by_preset.values())
        max_change[c] = max((relative_change(a, b) for a, b in combinations(values, 2)), default=0.0)
    flagged = [c for c in columns if max_change[c] > STABILITY_THRESHOLD]
    return SensitivityReport(tuple(presets), medians, max_change, flagged, summaries)


@dataclass
class GroupPosteriors:
    """Posterior draws of the mean score per arm, each shaped (chains, draws)."""

    draws: dict
    summaries: dict
    mode: str

    @property
    def groups(self) -> tuple:
        return tuple(self.draws)


def _arm_rows(data: PanelDataset):
    for arm in ARMS:
        rows = np.array([k for k, r in enumerate(data.records) if r.arm is arm], dtype=np.intp)
        if rows.size:
            yield arm, rows


def group_mean_posteriors(trace: TraceStore, data: PanelDataset, spec: CovariateSpec,
                          mode: str = "observed", include_random_effects: bool = True) -> GroupPosteriors:
    """Posterior of the model-implied mean score in each arm.

    ``observed`` averages x'beta (+ gamma_i) over the arm's own visit rows.
    ``reference`` averages x'beta over every row of the panel with the arm
    assignment switched to the target arm.
    """
    design = encode_design(data, spec)
    if tuple(design.columns) != tuple(trace.columns):
        raise SpecMismatch(f"trace columns {trace.columns} do not match spec columns {design.columns}")
    beta = trace.beta()
    out = {}
    if mode == "observed":
        gamma = None
        if include_random_effects:
            gnames = trace.gamma_names()
            if len(gnames) != data.n_patients:
                raise SpecMismatch("trace lacks the random intercepts needed for observed arm means")
            gamma = trace.draws[:, :, [trace.index(n) for n in gnames]]
        for arm, rows in _arm_rows(data):
            xbar = design.values[rows].mean(axis=0)
            mean = beta @ xbar
            if gamma is not None:
                weights = np.bincount(design.patient_of_row[rows], minlength=data.n_patients) / rows.size
                mean = mean + gamma @ weights
            out[arm.label] = mean
    elif mode == "reference":
        for arm, _ in _arm_rows(data):
            switched = from_records(replace(r, arm=arm) for r in data.records)
            with warnings.catch_warnings():
                # switching every row to one arm can zero the treatment columns
                warnings.simplefilter("ignore", UserWarning)
                xbar = encode_design(switched, spec).values.mean(axis=0)
            out[arm.label] = beta @ xbar
    else:
        raise ValueError(f"mode must be 'observed' or 'reference', got {mode!r}")
    return GroupPosteriors(out, {k: summarize_draws(v) for k, v in out.items()}, mode)


@dataclass(frozen=True)
class Contrast:
    group: str
    reference: str
    median: float
    lower: float
    upper: float
    p_less: float
    p_greater: float
    p_tie: float

    @property
    def contains_zero(self) -> bool:
        return self.lower <= 0.0 <= self.upper

    def as_dict(self) -> dict:
        return {
            "group": self.group, "reference": self.reference, "median": self.median,
            "lower": self.lower, "upper": self.upper, "p_less": self.p_less,
            "p_greater": self.p_greater, "p_tie": self.p_tie, "contains_zero": self.contains_zero,
        }


def contrast(a: np.ndarray, b: np.ndarray, group: str, reference: str, prob: float = 0.95) -> Contrast:
    """Posterior of ``a - b`` with draws paired by (chain, iteration)."""
    diff = (np.asarray(a) - np.asarray(b)).ravel()
    alpha = (1 - prob) / 2
    lo, hi = np.quantile(diff, [alpha, 1 - alpha])
    n = diff.size
    less = np.count_nonzero(diff < 0)
    greater = np.count_nonzero(diff > 0)
    return Contrast(group, reference, float(np.median(diff)), float(lo), float(hi),
                    less / n, greater / n, (n - less - greater) / n)


def pairwise_contrasts(groups: GroupPosteriors, pairs: Optional[Sequence[tuple]] = None) -> list:
    """Contrasts for each (group, reference) pair; default is every later arm minus every earlier arm.

    ``p_less`` is the posterior probability that the group's mean score is
    lower (better) than the reference's.
    """
    labels = groups.groups
    if len(labels) < 2:
        return []
    if pairs is None:
        pairs = [(labels[j], labels[i]) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    return [contrast(groups.draws[g], groups.draws[r], g, r) for g, r in pairs]
