"""Backward elimination of covariates by credible-interval significance."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .diagnostics import kde_evaluate, silverman_bandwidth, trapezoid, _require
from .errors import ConfigError
from .model import PriorConfig
from .pipeline import Fit, fit
from .sampler import SamplerConfig, TraceStore, derive_seed
from .trial_data import CovariateSpec, PanelDataset


def compare_sigma_densities(full_trace: TraceStore, reduced_trace: TraceStore,
                            which: str = "score", grid: int = 512) -> float:
    """Overlap coefficient of the two posterior densities of sigma_<which>."""
    name = f"sigma_{which}"
    if name not in full_trace.names or name not in reduced_trace.names:
        raise ConfigError(f"both traces must contain {name}")
    a = full_trace.pooled(name)
    b = reduced_trace.pooled(name)
    return overlap_coefficient(a, b, grid)


def overlap_coefficient(a, b, grid: int = 512) -> float:
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    _require(a.size)
    _require(b.size)
    ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    lo = min(a.min() - 3 * ha, b.min() - 3 * hb)
    hi = max(a.max() + 3 * ha, b.max() + 3 * hb)
    pts = np.linspace(lo, hi, grid)
    fa = kde_evaluate(a, pts, ha)
    fb = kde_evaluate(b, pts, hb)
    fa /= trapezoid(fa, pts)
    fb /= trapezoid(fb, pts)
    return float(min(max(trapezoid(np.minimum(fa, fb), pts), 0.0), 1.0))


def term_scores(f: Fit) -> dict:
    """Per-term (significant, |median|/sd) from a fit's column summaries."""
    design = f.model.design
    out = {}
    for term in f.spec.terms:
        cols = [c for c, t in zip(design.columns, design.term_of_column) if t == term]
        sums = [f.summary[c] for c in cols]
        significant = any(s.significant for s in sums)
        ratio = max(abs(s.median) / s.sd if s.sd > 0 else np.inf for s in sums)
        out[term] = (significant, float(ratio))
    return out


def protected_terms(terms) -> set:
    """Main effects that are parents of an interaction still in the model."""
    keep = set()
    for term in terms:
        keep.update(CovariateSpec.parents(term))
    return keep


def hierarchy_ok(terms) -> bool:
    present = set(terms)
    return all(p in present for t in terms for p in CovariateSpec.parents(t))


def choose_removal(spec: CovariateSpec, scores: dict) -> Optional[str]:
    """Least-supported eligible term: smallest |median|/sd, ties to the later term."""
    protected = protected_terms(spec.terms)
    best, best_ratio = None, np.inf
    for term in reversed(spec.terms):
        significant, ratio = scores[term]
        if term == "intercept" or significant or term in protected:
            continue
        if best is None or ratio < best_ratio:
            best, best_ratio = term, ratio
    return best


@dataclass
class SelectionStep:
    step: int
    terms: tuple
    summary: dict
    removed: Optional[str] = None
    sigma_overlap: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "terms": list(self.terms),
            "removed": self.removed,
            "sigma_overlap": self.sigma_overlap,
            "summaries": {k: v.as_dict() for k, v in self.summary.items()},
        }


@dataclass
class SelectionResult:
    steps: list
    final_spec: CovariateSpec
    full_fit: Fit
    final_fit: Fit
    full_vs_final_overlap: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "steps": [s.as_dict() for s in self.steps],
            "final_terms": list(self.final_spec.terms),
            "full_vs_final_sigma_overlap": dict(self.full_vs_final_overlap),
        }


def backward_select(data: PanelDataset, full_spec: CovariateSpec, prior: Optional[PriorConfig],
                    sampler_config: SamplerConfig, workers: int = 1) -> SelectionResult:
    """Refit and drop one non-significant term at a time until none is eligible.

    Step ``k`` samples with seed ``derive_seed(seed, k)``. The intercept and
    main effects of retained interactions are never removed.
    """
    if "intercept" not in full_spec.terms:
        raise ConfigError("the full model must include an intercept")
    spec = full_spec
    steps = []
    previous = None
    first = None
    k = 0
    while True:
        cfg = replace(sampler_config, seed=derive_seed(sampler_config.seed, k))
        current = fit(data, spec, cfg, prior, workers=workers)
        if first is None:
            first = current
        overlap = compare_sigma_densities(previous.trace, current.trace) if previous else None
        scores = term_scores(current)
        removed = choose_removal(spec, scores)
        steps.append(SelectionStep(k, spec.terms, current.summary, removed, overlap))
        if removed is None:
            break
        spec = spec.without(removed)
        previous = current
        k += 1
    overlaps = {
        which: compare_sigma_densities(first.trace, current.trace, which)
        for which in ("score", "gamma")
    }
    return SelectionResult(steps, spec, first, current, overlaps)
