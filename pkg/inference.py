"""
Log-domain forward-backward, sequence likelihood and Viterbi decoding.

Works with any model exposing pi, a, p_star and
log_emissions(series, exclude_self=...), e.g. KdeAsHmmModel or the
Gaussian HMM baseline.
"""

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from errors import DegenerateModelError
from model_core import TimeSeries

logger = logging.getLogger(__name__)


class EmissionModel(Protocol):
    pi: np.ndarray
    a: np.ndarray
    p_star: int

    def log_emissions(self, series: TimeSeries, exclude_self: bool = False) -> np.ndarray:
        ...


@dataclass
class Posteriors:
    """gamma (T+1-P*, N), zeta (T-P*, N, N) and ln P(x^{P*:T})."""
    gamma: np.ndarray
    zeta: np.ndarray
    loglik: float

    @property
    def n_scored(self) -> int:
        return self.gamma.shape[0]

    @property
    def loglik_per_datum(self) -> float:
        return self.loglik / self.n_scored


def _log_params(pi: np.ndarray, a: np.ndarray):
    row_sums = a.sum(axis=1)
    if np.any(row_sums <= 0):
        bad = int(np.nonzero(row_sums <= 0)[0][0])
        raise DegenerateModelError(f"Row {bad} of the transition matrix is all zero")
    with np.errstate(divide="ignore"):
        return np.log(pi), np.log(a)


def _forward(log_pi: np.ndarray, log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    n_t, n = log_b.shape
    alpha = np.empty((n_t, n))
    alpha[0] = log_pi + log_b[0]
    with np.errstate(invalid="ignore"):
        for t in range(1, n_t):
            alpha[t] = logsumexp(alpha[t - 1][:, None] + log_a, axis=0) + log_b[t]
    return alpha


def _backward(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    n_t, n = log_b.shape
    beta = np.zeros((n_t, n))
    with np.errstate(invalid="ignore"):
        for t in range(n_t - 2, -1, -1):
            beta[t] = logsumexp(log_a + (log_b[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def _total(alpha_last: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        loglik = float(logsumexp(alpha_last))
    if not np.isfinite(loglik):
        raise DegenerateModelError("The model assigns zero probability to the series")
    return loglik


def forward_backward_from_log_emissions(log_pi: np.ndarray, log_a: np.ndarray,
                                        log_b: np.ndarray) -> Posteriors:
    """Posteriors from log-parameters and a (T+1-P*, N) log-emission table."""
    alpha = _forward(log_pi, log_a, log_b)
    loglik = _total(alpha[-1])
    beta = _backward(log_a, log_b)
    gamma = np.exp(alpha + beta - loglik)
    gamma /= gamma.sum(axis=1, keepdims=True)
    log_zeta = (alpha[:-1, :, None] + log_a[None, :, :]
                + (log_b[1:] + beta[1:])[:, None, :] - loglik)
    zeta = np.exp(log_zeta)
    if zeta.shape[0]:
        zeta /= zeta.sum(axis=(1, 2), keepdims=True)
    return Posteriors(gamma=gamma, zeta=zeta, loglik=loglik)


def forward_backward(model: EmissionModel, series: TimeSeries, exclude_self: bool = False) -> Posteriors:
    """
    State posteriors and log-likelihood of x^{P*:T}.

    Args:
        model: any emission model
        series: observations; the first P* rows only condition AR terms
        exclude_self: skip the center at l = t (training on the center series)

    Returns:
        Posteriors
    """
    series.require_length(model.p_star, extra=1)
    log_pi, log_a = _log_params(model.pi, model.a)
    log_b = model.log_emissions(series, exclude_self=exclude_self)
    return forward_backward_from_log_emissions(log_pi, log_a, log_b)


def log_likelihood_from_log_emissions(log_pi: np.ndarray, log_a: np.ndarray, log_b: np.ndarray) -> float:
    return _total(_forward(log_pi, log_a, log_b)[-1])


def log_likelihood(model: EmissionModel, series: TimeSeries, exclude_self: bool = False) -> float:
    """ln P(x^{P*:T} | model), forward pass only."""
    series.require_length(model.p_star, extra=1)
    log_pi, log_a = _log_params(model.pi, model.a)
    return log_likelihood_from_log_emissions(log_pi, log_a, model.log_emissions(series, exclude_self=exclude_self))


def viterbi_from_log_emissions(log_pi: np.ndarray, log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    """Most probable path; ties go to the lowest state index."""
    n_t, n = log_b.shape
    delta = np.empty((n_t, n))
    back = np.zeros((n_t, n), dtype=np.int64)
    delta[0] = log_pi + log_b[0]
    for t in range(1, n_t):
        scores = delta[t - 1][:, None] + log_a
        back[t] = np.argmax(scores, axis=0)
        delta[t] = scores[back[t], np.arange(n)] + log_b[t]
    if not np.any(np.isfinite(delta[-1])):
        raise DegenerateModelError("No state path has positive probability")
    path = np.empty(n_t, dtype=np.int64)
    path[-1] = int(np.argmax(delta[-1]))
    for t in range(n_t - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def viterbi(model: EmissionModel, series: TimeSeries) -> np.ndarray:
    """State sequence for instants P*..T."""
    series.require_length(model.p_star, extra=1)
    log_pi, log_a = _log_params(model.pi, model.a)
    return viterbi_from_log_emissions(log_pi, log_a, model.log_emissions(series, exclude_self=False))


def path_log_probability(log_pi: np.ndarray, log_a: np.ndarray, log_b: np.ndarray,
                         path: Sequence[int]) -> float:
    """Joint log-probability of one state path and the observations."""
    path = np.asarray(path)
    steps = np.arange(len(path))
    total = log_pi[path[0]] + log_b[steps, path].sum()
    if len(path) > 1:
        total += log_a[path[:-1], path[1:]].sum()
    return float(total)
