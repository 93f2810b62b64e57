"""
Plain Gaussian HMM baseline: one diagonal Gaussian per state.

Shares the inference recursions and the transition update with the KDE
models and scores instants P*..T, so per-datum values are comparable.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.stats import norm
from sklearn.cluster import KMeans

from em_trainer import DIAGONAL_WEIGHT, MONOTONE_SLACK, FitReport, m_step_transitions
from errors import InvariantError, ModelFormatError, NonMonotoneError
from inference import _log_params, forward_backward_from_log_emissions
from model_core import MODEL_FORMAT_VERSION, SUM_TOLERANCE, TimeSeries

logger = logging.getLogger(__name__)

MODEL_TYPE = "gaussian-hmm"
VARIANCE_FLOOR_FACTOR = 1e-6


@dataclass
class GaussianHmmModel:
    n_states: int
    p_star: int
    pi: np.ndarray
    a: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    feature_names: Tuple[str, ...]
    variance_floor: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        n, m = self.n_states, len(self.feature_names)
        if self.pi.shape != (n,) or self.a.shape != (n, n):
            raise InvariantError("pi / A shapes do not match the number of states")
        if self.means.shape != (n, m) or self.variances.shape != (n, m):
            raise InvariantError("means / variances shapes do not match the model dimensions")
        if abs(self.pi.sum() - 1.0) > SUM_TOLERANCE or np.any(self.pi < 0):
            raise InvariantError("pi must be a probability vector")
        if np.any(np.abs(self.a.sum(axis=1) - 1.0) > SUM_TOLERANCE) or np.any(self.a < 0):
            raise InvariantError("Every row of A must be a probability vector")
        if not np.all(np.isfinite(self.means)) or np.any(~(self.variances > 0)):
            raise InvariantError("Means must be finite and variances positive")

    def log_emissions(self, series: TimeSeries, exclude_self: bool = False) -> np.ndarray:
        """ln N(x^t; mean_i, diag(var_i)) for t = P*..T; exclude_self has no effect."""
        if series.n_vars != self.n_vars:
            raise InvariantError(f"Series has {series.n_vars} features, model expects {self.n_vars}")
        x = series.values[self.p_star:]
        scale = np.sqrt(self.variances)
        return norm.logpdf(x[:, None, :], loc=self.means[None], scale=scale[None]).sum(axis=2)

    def to_dict(self, provenance: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "model_type": MODEL_TYPE,
            "n_states": int(self.n_states),
            "p_star": int(self.p_star),
            "feature_names": list(self.feature_names),
            "pi": self.pi.tolist(),
            "a": self.a.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "variance_floor": self.variance_floor.tolist(),
        }
        if provenance is not None:
            doc["provenance"] = provenance
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "GaussianHmmModel":
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"Unsupported model format version {doc.get('format_version')!r}")
        if doc.get("model_type") != MODEL_TYPE:
            raise ModelFormatError(f"Not a Gaussian HMM model: {doc.get('model_type')!r}")
        try:
            model = cls(n_states=int(doc["n_states"]), p_star=int(doc["p_star"]),
                        pi=np.asarray(doc["pi"], dtype=float), a=np.asarray(doc["a"], dtype=float),
                        means=np.asarray(doc["means"], dtype=float),
                        variances=np.asarray(doc["variances"], dtype=float),
                        feature_names=tuple(doc["feature_names"]),
                        variance_floor=np.asarray(doc["variance_floor"], dtype=float))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"Malformed model document: {e}")
        model.validate()
        return model


def _initial_model(series: TimeSeries, n_states: int, p_star: int, seed: int) -> GaussianHmmModel:
    x = series.values[p_star:]
    if x.shape[0] < n_states:
        raise InvariantError(f"{x.shape[0]} scored rows cannot initialise {n_states} states")
    feature_var = x.var(axis=0)
    floor = VARIANCE_FLOOR_FACTOR * np.where(feature_var > 0, feature_var, 1.0)
    kmeans = KMeans(n_clusters=n_states, n_init=10, random_state=seed % (2 ** 32))
    labels = kmeans.fit_predict(x)
    means = kmeans.cluster_centers_.copy()
    variances = np.empty_like(means)
    for i in range(n_states):
        members = x[labels == i]
        variances[i] = members.var(axis=0) if members.shape[0] > 1 else feature_var
    variances = np.maximum(variances, floor)
    a = DIAGONAL_WEIGHT * np.eye(n_states) + 1.0 / n_states
    a /= a.sum(axis=1, keepdims=True)
    return GaussianHmmModel(n_states=n_states, p_star=p_star, pi=np.full(n_states, 1.0 / n_states),
                            a=a, means=means, variances=variances,
                            feature_names=series.feature_names, variance_floor=floor)


def fit_gaussian_hmm(series: TimeSeries, n_states: int, p_star: int = 1, max_iter: int = 100,
                     rel_tol: float = 1e-6, seed: int = 0) -> Tuple[GaussianHmmModel, FitReport]:
    """Baum-Welch for the diagonal Gaussian HMM; KMeans initialisation."""
    if n_states < 1:
        raise InvariantError(f"Number of states must be >= 1, got {n_states}")
    series.require_length(p_star, extra=2)
    started = time.perf_counter()
    model = _initial_model(series, n_states, p_star, seed)
    x = series.values[p_star:]
    report = FitReport()
    clamped = False
    passes = max_iter + 1 if max_iter > 0 else 0
    for iteration in range(passes):
        log_pi, log_a = _log_params(model.pi, model.a)
        posteriors = forward_backward_from_log_emissions(log_pi, log_a, model.log_emissions(series))
        value = posteriors.loglik_per_datum
        if report.loglik_per_datum:
            previous = report.loglik_per_datum[-1]
            if value < previous - MONOTONE_SLACK * abs(previous):
                message = (f"Gaussian HMM iteration {iteration + 1} decreased the log-likelihood "
                           f"per datum from {previous:.12g} to {value:.12g}")
                if not clamped:
                    raise NonMonotoneError(message)
                logger.warning("%s (variance floor active)", message)
        report.loglik_per_datum.append(value)
        logger.debug("Gaussian HMM iteration %d: %.6f", iteration + 1, value)
        if len(report.loglik_per_datum) >= 2 and \
                abs(value - report.loglik_per_datum[-2]) <= rel_tol * abs(report.loglik_per_datum[-2]):
            report.converged = True
            break
        if iteration == max_iter:
            break
        gamma = posteriors.gamma
        model.pi, model.a = m_step_transitions(posteriors)
        mass = gamma.sum(axis=0)
        clamped = False
        for i in range(n_states):
            if mass[i] <= 0:
                clamped = True
                continue
            w = gamma[:, i] / mass[i]
            model.means[i] = w @ x
            raw = w @ (x - model.means[i]) ** 2
            clamped = clamped or bool(np.any(raw < model.variance_floor))
            model.variances[i] = np.maximum(raw, model.variance_floor)
    report.iterations = len(report.loglik_per_datum)
    report.wall_time_s = time.perf_counter() - started
    logger.info("Gaussian HMM finished after %d iterations", report.iterations)
    return model, report
