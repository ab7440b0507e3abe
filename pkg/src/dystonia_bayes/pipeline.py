"""Encode -> sample -> summarize in one call."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .diagnostics import summarize
from .model import ModelDefinition, PriorConfig, default_prior
from .sampler import SamplerConfig, TraceStore, run_chains
from .trial_data import CovariateSpec, PanelDataset, encode_design


@dataclass(frozen=True)
class Fit:
    spec: CovariateSpec
    model: ModelDefinition
    trace: TraceStore
    summary: dict


def build_model(data: PanelDataset, spec: CovariateSpec, prior: Optional[PriorConfig] = None) -> ModelDefinition:
    return ModelDefinition(encode_design(data, spec), prior or default_prior(), data.scores())


def fit(data: PanelDataset, spec: CovariateSpec, config: SamplerConfig,
        prior: Optional[PriorConfig] = None, workers: int = 1, hpd: bool = False) -> Fit:
    model = build_model(data, spec, prior)
    trace = run_chains(model, config, workers=workers)
    return Fit(spec, model, trace, summarize(trace, hpd=hpd))
