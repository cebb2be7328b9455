"""Scalar Gaussian mixture estimation by expectation-maximization.

Produces per-pixel, per-label data costs (negative log class-conditional
densities) for the labeling game. Log-likelihood is guaranteed nondecreasing
across iterations up to the variance floor.
"""

from dataclasses import dataclass, field

import numpy as np

VARIANCE_FLOOR = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


class EmptyComponentError(ValueError):
    """A mixture component received (numerically) zero total responsibility."""


@dataclass(frozen=True)
class GmmParams:
    """Mixture weights, means, and variances for M scalar components."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if not (w.shape == mu.shape == var.shape) or w.ndim != 1 or w.size < 1:
            raise ValueError("weights, means, variances must be equal-length 1-D")
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("weights must be a probability vector")
        if np.any(var < VARIANCE_FLOOR):
            raise ValueError(f"variances must be >= {VARIANCE_FLOOR}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def component_count(self):
        return self.weights.size


@dataclass
class EmTrace:
    """Per-iteration log-likelihood record of one EM run."""

    loglik_per_iter: list = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False
    epsilon: float = 0.0
    max_iters: int = 0


def _log_normal(x, mean, variance):
    return -0.5 * (_LOG_2PI + np.log(variance)) - (x - mean) ** 2 / (2.0 * variance)


def log_likelihood(data, params: GmmParams) -> float:
    data = np.asarray(data, dtype=np.float64)
    logp = _log_normal(data[:, None], params.means[None, :], params.variances[None, :])
    logp = logp + np.log(np.maximum(params.weights[None, :], 1e-300))
    m = logp.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))).sum())


def e_step(data, params: GmmParams) -> np.ndarray:
    """Responsibilities r[n, m] proportional to weight_m * N(x_n; mean_m, var_m),
    rows normalized to 1. Computed in log space for stability."""
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("data must be nonempty")
    logp = _log_normal(data[:, None], params.means[None, :], params.variances[None, :])
    logp = logp + np.log(np.maximum(params.weights[None, :], 1e-300))
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    return resp


def m_step(data, resp) -> GmmParams:
    """Closed-form Q-maximizer: responsibility-weighted weights, means, and
    floored variances."""
    data = np.asarray(data, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    totals = resp.sum(axis=0)
    if np.any(totals < 1e-12):
        bad = int(np.argmin(totals))
        raise EmptyComponentError(f"component {bad} has total responsibility < 1e-12")
    weights = totals / data.size
    means = (resp * data[:, None]).sum(axis=0) / totals
    variances = (resp * (data[:, None] - means[None, :]) ** 2).sum(axis=0) / totals
    variances = np.maximum(variances, VARIANCE_FLOOR)
    return GmmParams(weights=weights, means=means, variances=variances)


def _init_params(data, component_count, seed):
    # Quantile-spread means: deterministic and scale-aware. The seed only
    # breaks exact ties between duplicate quantiles (heavy repeated data).
    qs = (np.arange(component_count) + 0.5) / component_count
    means = np.quantile(data, qs)
    if np.unique(means).size < component_count:
        rng = np.random.default_rng(int(seed) % 2 ** 63)
        scale = max(float(np.std(data)), 1e-3)
        means = means + rng.standard_normal(component_count) * 1e-6 * scale
    pooled = max(float(np.var(data)), VARIANCE_FLOOR)
    weights = np.full(component_count, 1.0 / component_count)
    return GmmParams(weights=weights, means=means,
                     variances=np.full(component_count, pooled))


def fit(data, component_count: int, epsilon: float = 1e-8,
        max_iters: int = 200, seed: int = 0):
    """Run EM until the absolute log-likelihood change drops below epsilon or
    max_iters is hit. Returns (GmmParams, EmTrace); the trace log-likelihoods
    are nondecreasing within 1e-9.
    """
    data = np.asarray(data, dtype=np.float64).ravel()
    if component_count < 1:
        raise ValueError("component_count must be >= 1")
    if data.size < component_count:
        raise ValueError(
            f"need at least {component_count} samples, got {data.size}"
        )
    params = _init_params(data, component_count, seed)
    trace = EmTrace(epsilon=epsilon, max_iters=max_iters)
    previous = log_likelihood(data, params)
    trace.loglik_per_iter.append(previous)
    for _ in range(max_iters):
        resp = e_step(data, params)
        params = m_step(data, resp)
        current = log_likelihood(data, params)
        trace.loglik_per_iter.append(current)
        trace.iterations_used += 1
        if abs(current - previous) < epsilon:
            trace.converged = True
            break
        previous = current
    return params, trace


def data_costs(img, params: GmmParams) -> np.ndarray:
    """Per-pixel, per-label cost table: -log N(y_p / 255; mean_l, var_l).

    Intensities are normalized to [0, 1] to match mixture parameters fitted on
    normalized data. The per-pixel argmin is the maximum-likelihood component.
    """
    plane = img.plane().astype(np.float64) / 255.0
    costs = -_log_normal(
        plane[:, :, None], params.means[None, None, :],
        params.variances[None, None, :],
    )
    return costs
