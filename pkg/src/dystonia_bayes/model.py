"""Random-intercept model, priors and the unnormalized log posterior.

The model::

    y_ij   ~ Normal(x_ij' beta + gamma_i, sigma_score^2)
    gamma_i ~ Normal(0, sigma_gamma^2)
    beta_k  ~ Normal(mu_beta, 1 / tau_beta)
    mu_beta ~ Normal(mu_beta_mean, 1 / mu_beta_precision)
    tau_beta ~ Gamma(shape, rate)
    sigma_gamma ~ Uniform(0, sigma_gamma_upper)
    sigma_score ~ Uniform(0, sigma_score_upper)

Any of ``tau_beta``, ``sigma_score`` and ``sigma_gamma`` can be pinned to a
fixed value, which removes its hyperprior; the prior-strength presets use this.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy import special

from .errors import ConfigError, NonFinite
from .trial_data import DesignMatrix

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorConfig:
    mu_beta_mean: float = 0.0
    mu_beta_precision: float = 1e-6
    sigma_gamma_upper: float = 1000.0
    sigma_score_upper: float = 1000.0
    tau_beta_shape: float = 1e-3
    tau_beta_rate: float = 1e-3
    fixed_tau_beta: Optional[float] = None
    fixed_sigma_score: Optional[float] = None
    fixed_sigma_gamma: Optional[float] = None

    def __post_init__(self):
        if not math.isfinite(self.mu_beta_mean):
            raise ConfigError("mu_beta_mean must be finite")
        for name in ("mu_beta_precision", "sigma_gamma_upper", "sigma_score_upper",
                     "tau_beta_shape", "tau_beta_rate"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be finite and > 0, got {value}")
        for name, upper in (("fixed_sigma_score", self.sigma_score_upper),
                            ("fixed_sigma_gamma", self.sigma_gamma_upper),
                            ("fixed_tau_beta", math.inf)):
            value = getattr(self, name)
            if value is not None and not (0 < value < upper):
                raise ConfigError(f"{name} must lie in (0, {upper}), got {value}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name}={value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PriorConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"prior file line {line_no}: unknown or malformed entry {raw!r}")
            try:
                values[key] = float(value)
            except ValueError:
                raise ConfigError(f"prior file line {line_no}: {key} is not a number") from None
        return cls(**values)

    def as_dict(self) -> dict:
        return asdict(self)


def default_prior() -> PriorConfig:
    return PriorConfig()


# Precision settings for the three prior-strength scenarios.
PRESET_PRECISIONS = {
    "VeryWeak": {"tau_beta": 1e-5, "tau_score": 1e-3, "tau_gamma": 1e-3},
    "Weak": {"tau_beta": 1e-4, "tau_score": 1e-2, "tau_gamma": 1e-2},
    "Moderate": {"tau_beta": 1e-3, "tau_score": 1e-1, "tau_gamma": 1e-1},
}


def sensitivity_presets(base: Optional[PriorConfig] = None) -> dict:
    """Prior configurations with tau_beta, sigma_score and sigma_gamma pinned.

    Precisions are converted to standard deviations (``sigma = tau ** -0.5``)
    for the two variance components.
    """
    base = base or default_prior()
    out = {}
    for name, taus in PRESET_PRECISIONS.items():
        out[name] = replace(
            base,
            fixed_tau_beta=taus["tau_beta"],
            fixed_sigma_score=taus["tau_score"] ** -0.5,
            fixed_sigma_gamma=taus["tau_gamma"] ** -0.5,
        )
    return out


@dataclass(frozen=True)
class ModelDefinition:
    design: DesignMatrix
    prior: PriorConfig
    response: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        if y.ndim != 1 or y.shape[0] != self.design.values.shape[0]:
            raise ConfigError(
                f"response length {y.shape} does not match design rows {self.design.values.shape[0]}"
            )
        if self.design.n_patients < 1:
            raise ConfigError("model needs at least one patient")
        object.__setattr__(self, "response", y)

    @property
    def n_coef(self) -> int:
        return self.design.values.shape[1]

    @property
    def n_patients(self) -> int:
        return self.design.n_patients


@dataclass(frozen=True)
class ParameterPoint:
    beta: np.ndarray
    gamma: np.ndarray
    mu_beta: float
    sigma_gamma: float
    sigma_score: float
    tau_beta: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.beta, float), np.asarray(self.gamma, float),
            [self.mu_beta, self.sigma_gamma, self.sigma_score, self.tau_beta],
        ])


def _check_finite(point: ParameterPoint, model: ModelDefinition):
    if not np.all(np.isfinite(point.as_vector())):
        raise NonFinite("parameter point contains NaN or infinity")
    if not (np.all(np.isfinite(model.response)) and np.all(np.isfinite(model.design.values))):
        raise NonFinite("data contain NaN or infinity")


def log_posterior(model: ModelDefinition, point: ParameterPoint) -> float:
    """Joint log density of data and all parameters (normalizing constants included)."""
    _check_finite(point, model)
    prior = model.prior
    beta = np.asarray(point.beta, float)
    gamma = np.asarray(point.gamma, float)
    if beta.shape != (model.n_coef,) or gamma.shape != (model.n_patients,):
        raise ConfigError("parameter point does not match model dimensions")
    s_score, s_gamma, tau = point.sigma_score, point.sigma_gamma, point.tau_beta
    if not (0 < s_score < prior.sigma_score_upper and 0 < s_gamma < prior.sigma_gamma_upper and tau > 0):
        return -math.inf

    resid = model.response - model.design.values @ beta - gamma[model.design.patient_of_row]
    n = resid.size
    lp = -0.5 * n * (LOG_2PI + 2 * math.log(s_score)) - 0.5 * float(resid @ resid) / s_score**2
    p = gamma.size
    lp += -0.5 * p * (LOG_2PI + 2 * math.log(s_gamma)) - 0.5 * float(gamma @ gamma) / s_gamma**2
    k = beta.size
    dev = beta - point.mu_beta
    lp += 0.5 * k * (math.log(tau) - LOG_2PI) - 0.5 * tau * float(dev @ dev)
    b = prior.mu_beta_precision
    lp += 0.5 * (math.log(b) - LOG_2PI) - 0.5 * b * (point.mu_beta - prior.mu_beta_mean) ** 2
    if prior.fixed_tau_beta is None:
        a, r = prior.tau_beta_shape, prior.tau_beta_rate
        lp += a * math.log(r) - special.gammaln(a) + (a - 1) * math.log(tau) - r * tau
    if prior.fixed_sigma_score is None:
        lp -= math.log(prior.sigma_score_upper)
    if prior.fixed_sigma_gamma is None:
        lp -= math.log(prior.sigma_gamma_upper)
    return float(lp)


def marginal_covariance(point: ParameterPoint, i, j, i2, j2) -> float:
    """Covariance of two scores after integrating out the random intercepts."""
    if i != i2:
        return 0.0
    if j == j2:
        return point.sigma_score**2 + point.sigma_gamma**2
    return point.sigma_gamma**2


def marginal_covariance_matrix(point: ParameterPoint, patient_of_row: np.ndarray) -> np.ndarray:
    pid = np.asarray(patient_of_row)
    same = (pid[:, None] == pid[None, :]).astype(float)
    return point.sigma_gamma**2 * same + point.sigma_score**2 * np.eye(pid.size)
