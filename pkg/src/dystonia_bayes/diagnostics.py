"""Posterior summaries and convergence diagnostics for MCMC traces."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import InsufficientDraws
from .sampler import TraceStore

MIN_DRAWS = 100


@dataclass(frozen=True)
class ParamSummary:
    median: float
    sd: float
    lower: float
    upper: float
    ess: float
    geweke: float
    rhat: float
    significant: bool

    def as_dict(self) -> dict:
        return asdict(self)


def _require(n: int, minimum: int = MIN_DRAWS):
    if n < minimum:
        raise InsufficientDraws(f"need at least {minimum} draws, got {n}")


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased sample autocorrelation at all lags, computed by FFT."""
    x = np.asarray(x, float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def _ips_sum(rho: np.ndarray) -> float:
    """Geyer's initial positive sequence: -1 + 2 * sum of autocorrelations."""
    n = rho.size
    total = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        total += pair
        k += 1
    return max(2.0 * total - 1.0, 1e-12)


def ess(draws) -> float:
    """Effective sample size of a single chain (capped at the number of draws)."""
    x = np.asarray(draws, float).ravel()
    _require(x.size)
    if np.ptp(x) == 0:
        return float(x.size)
    tau = _ips_sum(autocorrelation(x))
    return float(min(x.size / tau, x.size))


def long_run_variance(x: np.ndarray) -> float:
    """Spectral density at frequency zero, estimated from the autocorrelations."""
    x = np.asarray(x, float)
    var = float(np.var(x))
    if var == 0:
        return 0.0
    return var * _ips_sum(autocorrelation(x))


def geweke(draws, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke z-score comparing the means of the early and late segments."""
    x = np.asarray(draws, float).ravel()
    _require(x.size)
    if not (0 < first < 1 and 0 < last < 1 and first + last <= 1):
        raise ValueError("first and last must be fractions with first + last <= 1")
    a = x[: int(first * x.size)]
    b = x[x.size - int(last * x.size):]
    var = long_run_variance(a) / a.size + long_run_variance(b) / b.size
    if var == 0:
        return 0.0 if a.mean() == b.mean() else math.copysign(math.inf, a.mean() - b.mean())
    return float((a.mean() - b.mean()) / math.sqrt(var))


def split_rhat(chains) -> float:
    """Split R-hat for an array of shape (chains, draws); a 1-D array is one chain."""
    x = np.atleast_2d(np.asarray(chains, float))
    half = x.shape[1] // 2
    if half < 2:
        raise InsufficientDraws("split R-hat needs at least 4 draws per chain")
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    W = float(parts.var(axis=1, ddof=1).mean())
    B = n * float(means.var(ddof=1))
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def hpd_interval(draws, prob: float = 0.95) -> tuple:
    x = np.sort(np.asarray(draws, float).ravel())
    n = x.size
    k = max(int(math.ceil(prob * n)), 1)
    widths = x[k - 1:] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def summarize_draws(chains, prob: float = 0.95, hpd: bool = False) -> ParamSummary:
    """Summarize one parameter given draws of shape (chains, draws)."""
    x = np.atleast_2d(np.asarray(chains, float))
    pooled = x.ravel()
    _require(pooled.size)
    alpha = (1.0 - prob) / 2.0
    if hpd:
        lower, upper = hpd_interval(pooled, prob)
    else:
        lower, upper = (float(v) for v in np.quantile(pooled, [alpha, 1.0 - alpha]))
    median = float(np.median(pooled))
    if x.shape[1] >= MIN_DRAWS:
        ess_total = float(min(sum(ess(c) for c in x), pooled.size))
        z = max((geweke(c) for c in x), key=abs)
    else:
        ess_total, z = math.nan, math.nan
    return ParamSummary(
        median=median,
        sd=float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0,
        lower=lower,
        upper=upper,
        ess=ess_total,
        geweke=float(z),
        rhat=split_rhat(x),
        significant=bool(lower > 0 or upper < 0),
    )


def summarize(trace: TraceStore, names: Optional[Iterable[str]] = None,
              prob: float = 0.95, hpd: bool = False) -> dict:
    """Per-parameter summaries, keyed by name, in trace order.

    Intervals are central quantile intervals (linear interpolation between
    order statistics) unless ``hpd`` is set.
    """
    if names is None:
        names = [n for n in trace.names if not n.startswith("gamma[")]
    total = trace.n_chains * trace.n_draws
    _require(total)
    return {name: summarize_draws(trace.get(name), prob, hpd) for name in names}


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, float)
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.quantile(x, [0.75, 0.25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = 0.9 * spread * x.size ** (-0.2)
    if h <= 0:
        h = 1e-8 * max(1.0, float(np.abs(x).max()))
    return h


def kde_evaluate(draws, points, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density of ``draws`` at ``points`` (unnormalized on a grid)."""
    x = np.asarray(draws, float).ravel()
    pts = np.asarray(points, float)
    out = np.zeros(pts.size)
    chunk = max(1, 2_000_000 // max(pts.size, 1))
    for start in range(0, x.size, chunk):
        u = (pts[:, None] - x[None, start:start + chunk]) / bandwidth
        out += np.exp(-0.5 * u * u).sum(axis=1)
    return out / (x.size * bandwidth * math.sqrt(2 * math.pi))


def kde(draws, grid: int = 512, bandwidth: Optional[float] = None, span=None) -> tuple:
    """Gaussian KDE on an even grid; returns (grid points, density).

    The grid spans [min - 3h, max + 3h] unless ``span`` is given, and the
    density is rescaled so its trapezoid integral over the grid is 1.
    """
    x = np.asarray(draws, float).ravel()
    _require(x.size)
    h = bandwidth or silverman_bandwidth(x)
    lo, hi = span if span is not None else (x.min() - 3 * h, x.max() + 3 * h)
    pts = np.linspace(lo, hi, grid)
    dens = kde_evaluate(x, pts, h)
    area = trapezoid(dens, pts)
    if area > 0:
        dens = dens / area
    return pts, dens


def trapezoid(y, x) -> float:
    fn = getattr(np, "trapezoid", None) or np.trapz
    return float(fn(y, x))
