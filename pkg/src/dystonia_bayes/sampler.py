"""Gibbs sampler for the random-intercept model.

One sweep updates, in order: beta (Gaussian block), gamma (independent
Gaussians), mu_beta (Gaussian), tau_beta (Gamma), sigma_score and sigma_gamma
(stepping-out slice sampling on log sigma). By default the beta block is drawn
with the random intercepts integrated out, which together with the gamma step
that follows makes (beta, gamma) a joint draw; ``collapse_gamma=False`` uses
the plain conditional given gamma instead.

Chain ``c`` draws from ``PCG64(SeedSequence(seed, spawn_key=(c,)))`` so results
do not depend on how chains are scheduled.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, DegenerateSS, SamplerError, SingularSystem
from .model import ModelDefinition, ParameterPoint, PriorConfig

HYPER_NAMES = ("mu_beta", "sigma_gamma", "sigma_score", "tau_beta")
MAX_CONDITION = 1e12
_TINY = np.finfo(float).tiny
_HUGE = 1e300
_INITS = ("data", "prior")


@dataclass(frozen=True)
class SamplerConfig:
    """MCMC settings.

    ``iterations`` counts post-burn-in sweeps per chain; every ``thin``-th one
    is retained. ``frozen`` names hyperparameters held at their initial value
    (a debugging aid used by the calibration negative control).
    """

    seed: int
    chains: int = 4
    iterations: int = 10_000
    burn_in: int = 2_000
    thin: int = 1
    init: str = "data"
    collapse_gamma: bool = True
    store_gamma: bool = True
    frozen: tuple = ()

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.iterations < 100:
            raise ConfigError(f"iterations must be >= 100, got {self.iterations}")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.init not in _INITS:
            raise ConfigError(f"init must be one of {_INITS}, got {self.init!r}")
        bad = [name for name in self.frozen if name not in HYPER_NAMES]
        if bad:
            raise ConfigError(f"only hyperparameters can be frozen, got {bad}")

    @property
    def retained(self) -> int:
        return self.iterations // self.thin

    def as_dict(self) -> dict:
        return {
            "seed": int(self.seed), "chains": self.chains, "iterations": self.iterations,
            "burn_in": self.burn_in, "thin": self.thin, "init": self.init,
            "collapse_gamma": self.collapse_gamma, "store_gamma": self.store_gamma,
            "frozen": list(self.frozen),
        }


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(chain_id),))))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child 64-bit seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class SufficientStats:
    """Data summaries reused by every sweep."""

    def __init__(self, model: ModelDefinition):
        X = np.asarray(model.design.values, dtype=float)
        y = model.response
        pid = np.asarray(model.design.patient_of_row, dtype=np.intp)
        P = model.n_patients
        self.prior: PriorConfig = model.prior
        self.X, self.y, self.pid = X, y, pid
        self.N, self.K, self.P = X.shape[0], X.shape[1], P
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.n_i = np.bincount(pid, minlength=P).astype(float)
        self.S = np.zeros((P, self.K))
        np.add.at(self.S, pid, X)
        self.ysum = np.bincount(pid, weights=y, minlength=P) if self.N else np.zeros(P)
        self.xtx_eig = np.linalg.eigvalsh(self.XtX) if self.K else np.zeros(0)


@dataclass
class ChainState:
    beta: np.ndarray
    gamma: np.ndarray
    mu_beta: float
    sigma_gamma: float
    sigma_score: float
    tau_beta: float

    def to_point(self) -> ParameterPoint:
        return ParameterPoint(self.beta.copy(), self.gamma.copy(), self.mu_beta,
                              self.sigma_gamma, self.sigma_score, self.tau_beta)

    @classmethod
    def from_point(cls, point: ParameterPoint) -> "ChainState":
        return cls(np.array(point.beta, float), np.array(point.gamma, float), float(point.mu_beta),
                   float(point.sigma_gamma), float(point.sigma_score), float(point.tau_beta))


def _as_stats(model) -> SufficientStats:
    return model if isinstance(model, SufficientStats) else SufficientStats(model)


# --------------------------------------------------------------------------
# Conditional updates
# --------------------------------------------------------------------------


def beta_conditional(model, state: ChainState, collapse: bool = False):
    """Precision matrix and mean of the Gaussian conditional of beta."""
    st = _as_stats(model)
    K = st.K
    tau_s = state.sigma_score**-2
    tau_b = state.tau_beta
    if collapse:
        s2g = state.sigma_gamma**2
        w = s2g / (state.sigma_score**2 + st.n_i * s2g)
        Q = tau_s * (st.XtX - st.S.T @ (w[:, None] * st.S)) + tau_b * np.eye(K)
        b = tau_s * (st.Xty - st.S.T @ (w * st.ysum)) + tau_b * state.mu_beta
        eig = np.linalg.eigvalsh(Q)
        lo, hi = eig[0], eig[-1]
    else:
        Q = tau_s * st.XtX + tau_b * np.eye(K)
        b = tau_s * (st.Xty - st.S.T @ state.gamma) + tau_b * state.mu_beta
        lo = tau_s * st.xtx_eig[0] + tau_b
        hi = tau_s * st.xtx_eig[-1] + tau_b
    if not (lo > 0 and hi / lo <= MAX_CONDITION):
        cond = hi / lo if lo > 0 else math.inf
        raise SingularSystem(f"beta conditional precision is ill-conditioned (cond={cond:.3g})")
    L = linalg.cholesky(Q, lower=True)
    mean = linalg.cho_solve((L, True), b)
    return Q, L, mean


def update_beta(model, state: ChainState, rng: np.random.Generator, collapse: bool = False) -> np.ndarray:
    st = _as_stats(model)
    if st.K == 0:
        return np.zeros(0)
    _, L, mean = beta_conditional(st, state, collapse)
    z = rng.standard_normal(st.K)
    return mean + linalg.solve_triangular(L, z, lower=True, trans="T")


def update_gamma(model, state: ChainState, rng: np.random.Generator) -> np.ndarray:
    st = _as_stats(model)
    tau_s = state.sigma_score**-2
    tau_g = state.sigma_gamma**-2
    resid_sum = st.ysum - st.S @ state.beta if st.K else st.ysum
    prec = st.n_i * tau_s + tau_g
    mean = tau_s * resid_sum / prec
    return mean + rng.standard_normal(st.P) / np.sqrt(prec)


def update_mu_beta(state: ChainState, prior: PriorConfig, rng: np.random.Generator) -> float:
    K = state.beta.size
    prec = prior.mu_beta_precision + K * state.tau_beta
    mean = (prior.mu_beta_precision * prior.mu_beta_mean + state.tau_beta * float(state.beta.sum())) / prec
    return float(mean + rng.standard_normal() / math.sqrt(prec))


def _gamma_draw(shape: float, rate: float, rng: np.random.Generator) -> float:
    # Shapes far below 1 underflow to exactly 0; draw via Gamma(a+1) * U**(1/a) in log space.
    if shape < 1.0:
        log_g = math.log(rng.gamma(shape + 1.0)) + math.log(rng.random() or _TINY) / shape
        value = math.exp(max(log_g, -700.0)) / rate
    else:
        value = rng.gamma(shape) / rate
    return float(min(max(value, _TINY), _HUGE))


def update_tau_beta(state: ChainState, prior: PriorConfig, rng: np.random.Generator) -> float:
    dev = state.beta - state.mu_beta
    shape = prior.tau_beta_shape + 0.5 * state.beta.size
    rate = prior.tau_beta_rate + 0.5 * float(dev @ dev)
    return _gamma_draw(shape, rate, rng)


def slice_sample(logf, x0: float, width: float, rng: np.random.Generator,
                 upper: float = math.inf, max_steps: int = 64) -> float:
    """One univariate slice-sampling update with stepping out and shrinkage.

    ``logf`` must be finite at ``x0`` and the support must lie below ``upper``.
    """
    level = logf(x0) - rng.standard_exponential()
    left = x0 - width * rng.random()
    right = left + width
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    while j > 0 and logf(left) > level:
        left -= width
        j -= 1
    while k > 0 and right < upper and logf(right) > level:
        right += width
        k -= 1
    right = min(right, upper)
    while True:
        x1 = left + (right - left) * rng.random()
        if logf(x1) > level:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-14 * max(1.0, abs(x0)):
            return x0


def sigma_conditional_terms(model, state: ChainState, which: str):
    """Return (m, SS, upper) for the scale parameter ``which``."""
    st = _as_stats(model)
    if which == "score":
        resid = st.y - (st.X @ state.beta if st.K else 0.0) - state.gamma[st.pid]
        return st.N, float(resid @ resid), st.prior.sigma_score_upper
    if which == "gamma":
        return st.P, float(state.gamma @ state.gamma), st.prior.sigma_gamma_upper
    raise ValueError(f"which must be 'score' or 'gamma', got {which!r}")


def sigma_log_density(m: int, ss: float, upper: float):
    """Unnormalized log density of log(sigma) under sigma^-m exp(-SS / 2 sigma^2) on (0, upper)."""
    log_upper = math.log(upper)

    def logf(u):
        if u >= log_upper:
            return -math.inf
        return -(m - 1) * u - 0.5 * ss * math.exp(-2.0 * u)

    return logf


def update_sigma(model, state: ChainState, which: str, rng: np.random.Generator) -> float:
    st = _as_stats(model)
    m, ss, upper = sigma_conditional_terms(st, state, which)
    if m > 0 and ss <= 0.0:
        raise DegenerateSS(f"sigma_{which}: residual sum of squares is zero with {m} terms")
    current = state.sigma_score if which == "score" else state.sigma_gamma
    width = 2.0 / math.sqrt(2.0 * max(m, 1))
    logf = sigma_log_density(m, ss, upper)
    u = slice_sample(logf, math.log(current), width, rng, upper=math.log(upper))
    return min(math.exp(u), upper * (1 - 1e-15))


# --------------------------------------------------------------------------
# Chains
# --------------------------------------------------------------------------


def _clamp_sigma(value: float, upper: float) -> float:
    if not math.isfinite(value) or value <= 0:
        value = min(1.0, upper / 2)
    return float(min(max(value, 1e-6 * upper), upper * 0.999))


def initial_state(model, config: SamplerConfig, rng: np.random.Generator) -> ChainState:
    st = _as_stats(model)
    prior = st.prior
    if config.init == "data":
        if st.K:
            beta = np.linalg.solve(st.XtX + 1e-6 * np.eye(st.K), st.Xty)
        else:
            beta = np.zeros(0)
        resid = st.y - (st.X @ beta if st.K else 0.0)
        s_score = float(np.std(resid, ddof=1)) if st.N > 1 else 1.0
        if st.N:
            have = st.n_i > 0
            means = np.bincount(st.pid, weights=resid, minlength=st.P)[have] / st.n_i[have]
            s_gamma = float(np.std(means, ddof=1)) if means.size > 1 else 1.0
        else:
            s_gamma = 1.0
        gamma = np.zeros(st.P)
        mu = float(beta.mean()) if st.K else 0.0
        tau = 1.0 / float(np.var(beta)) + 1e-6 if st.K > 1 and np.var(beta) > 0 else 1.0
    else:
        s_score = float(rng.uniform(0, prior.sigma_score_upper))
        s_gamma = float(rng.uniform(0, prior.sigma_gamma_upper))
        mu = float(prior.mu_beta_mean + rng.standard_normal() / math.sqrt(prior.mu_beta_precision))
        tau = _gamma_draw(prior.tau_beta_shape, prior.tau_beta_rate, rng)
        beta = mu + rng.standard_normal(st.K) / math.sqrt(tau)
        beta = np.clip(beta, -_HUGE, _HUGE)
        gamma = s_gamma * rng.standard_normal(st.P)
    state = ChainState(
        beta=np.asarray(beta, float),
        gamma=gamma,
        mu_beta=mu,
        sigma_gamma=_clamp_sigma(s_gamma, prior.sigma_gamma_upper),
        sigma_score=_clamp_sigma(s_score, prior.sigma_score_upper),
        tau_beta=float(min(max(tau, _TINY), _HUGE)),
    )
    if prior.fixed_tau_beta is not None:
        state.tau_beta = prior.fixed_tau_beta
    if prior.fixed_sigma_score is not None:
        state.sigma_score = prior.fixed_sigma_score
    if prior.fixed_sigma_gamma is not None:
        state.sigma_gamma = prior.fixed_sigma_gamma
    return state


def parameter_names(model: ModelDefinition, store_gamma: bool = True) -> tuple:
    names = list(model.design.columns) + list(HYPER_NAMES)
    if store_gamma:
        ids = getattr(model.design, "patient_ids", ()) or tuple(str(i) for i in range(model.n_patients))
        names += [f"gamma[{pid}]" for pid in ids]
    return tuple(names)


def sweep(st: SufficientStats, state: ChainState, rng: np.random.Generator, config: SamplerConfig) -> None:
    prior = st.prior
    skip = set(config.frozen)
    if prior.fixed_tau_beta is not None:
        skip.add("tau_beta")
    if prior.fixed_sigma_score is not None:
        skip.add("sigma_score")
    if prior.fixed_sigma_gamma is not None:
        skip.add("sigma_gamma")
    state.beta = update_beta(st, state, rng, collapse=config.collapse_gamma)
    state.gamma = update_gamma(st, state, rng)
    if "mu_beta" not in skip:
        state.mu_beta = update_mu_beta(state, prior, rng)
    if "tau_beta" not in skip:
        state.tau_beta = update_tau_beta(state, prior, rng)
    if "sigma_score" not in skip:
        state.sigma_score = update_sigma(st, state, "score", rng)
    if "sigma_gamma" not in skip:
        state.sigma_gamma = update_sigma(st, state, "gamma", rng)


def run_chain(model: ModelDefinition, config: SamplerConfig, chain_id: int) -> np.ndarray:
    """Run one chain; returns retained draws as an array (draws, parameters)."""
    st = SufficientStats(model)
    rng = chain_rng(config.seed, chain_id)
    state = initial_state(st, config, rng)
    n_keep = config.retained
    width = st.K + 4 + (st.P if config.store_gamma else 0)
    out = np.empty((n_keep, width))
    total = config.burn_in + n_keep * config.thin
    kept = 0
    for it in range(total):
        try:
            sweep(st, state, rng, config)
        except SamplerError as err:
            raise err.at(it, chain_id) from err
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            row = out[kept]
            row[: st.K] = state.beta
            row[st.K: st.K + 4] = (state.mu_beta, state.sigma_gamma, state.sigma_score, state.tau_beta)
            if config.store_gamma:
                row[st.K + 4:] = state.gamma
            kept += 1
    return out


@dataclass(frozen=True)
class TraceStore:
    """Retained draws, shape (chains, draws, parameters)."""

    names: tuple
    draws: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("trace parameter names must be unique")
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ConfigError("trace array must be (chains, draws, parameters)")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def get(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def pooled(self, name: str) -> np.ndarray:
        return self.get(name).reshape(-1)

    def beta(self) -> np.ndarray:
        """Beta draws, shape (chains, draws, K)."""
        idx = [self.names.index(c) for c in self.columns]
        return self.draws[:, :, idx]

    def gamma_names(self) -> tuple:
        return tuple(n for n in self.names if n.startswith("gamma["))

    def point(self, chain: int, draw: int, n_patients: int) -> ParameterPoint:
        row = self.draws[chain, draw]
        K = len(self.columns)
        gam = [self.names.index(n) for n in self.gamma_names()]
        if len(gam) != n_patients:
            raise ConfigError("trace does not store random intercepts")
        return ParameterPoint(row[:K].copy(), row[gam].copy(), *row[K:K + 4])

    def select(self, names: Sequence[str]) -> "TraceStore":
        idx = [self.names.index(n) for n in names]
        cols = tuple(c for c in self.columns if c in names)
        return TraceStore(tuple(names), self.draws[:, :, idx], cols)


def _run_chain_job(args):
    model, config, chain_id = args
    return run_chain(model, config, chain_id)


def run_chains(model: ModelDefinition, config: SamplerConfig, workers: Optional[int] = 1) -> TraceStore:
    """Run chains 1..C, optionally in worker processes; output is scheduling independent."""
    if model.n_patients < 2:
        raise ConfigError("sampling needs at least two patients")
    jobs = [(model, config, c) for c in range(1, config.chains + 1)]
    if workers is None or workers <= 1 or config.chains == 1:
        results = [_run_chain_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, config.chains)) as pool:
            results = list(pool.map(_run_chain_job, jobs))
    names = parameter_names(model, config.store_gamma)
    return TraceStore(names, np.stack(results), tuple(model.design.columns))


def merge_chains(chains: Sequence[np.ndarray], model: ModelDefinition, store_gamma: bool = True) -> TraceStore:
    return TraceStore(parameter_names(model, store_gamma), np.stack(list(chains)), tuple(model.design.columns))
