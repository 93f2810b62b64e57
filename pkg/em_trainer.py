"""
EM training of KDE-AsHMM parameters under a fixed dependency graph.

The E-step computes gamma, zeta and the kernel posterior psi block by
block over time and folds psi straight into sufficient statistics, so
peak memory is O(N * block * L) instead of O(N * T * L).
"""

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.linalg import LinAlgError

from errors import (BandwidthFloorWarning, InvariantError, LocalMaximumWarning,
                    NonMonotoneError, RidgeFallbackWarning, StateStarvationError,
                    StateStarvationWarning)
from inference import Posteriors, _log_params, forward_backward_from_log_emissions
from kernel_math import silverman_bandwidth
from model_core import (ContextGraph, KdeAsHmmModel, KernelWeights, TimeSeries,
                        design_columns, full_design, kernel_offsets, log_emission_matrix,
                        map_states, state_log_joint_block, validate_graph)

logger = logging.getLogger(__name__)

STARVATION_MASS = 1e-10
OMEGA_EPSILON = 1e-12
LABEL_OFF_WEIGHT = 1e-5
MONOTONE_SLACK = 1e-8
RIDGE_FACTOR = 1e-8
MAX_CONDITION = 1e12
DIAGONAL_WEIGHT = 999.0


@dataclass
class TrainConfig:
    """Settings for em_fit and sem_fit."""
    n_states: int = 3
    p_star: int = 1
    max_iter: int = 100
    rel_tol: float = 1e-6
    seed: int = 0
    graph: Optional[ContextGraph] = None
    variant: str = "kde-as"
    sem_rounds: int = 1
    per_state_budget: Optional[int] = None
    bandwidth_term: bool = True
    label_mapping: Optional[Dict[str, int]] = None
    block_size: int = 256
    threads: int = 1


@dataclass
class FitReport:
    """Training trace: log-likelihood per datum after every E-step."""
    loglik_per_datum: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_time_s: float = 0.0
    round_starts: List[int] = field(default_factory=lambda: [0])
    moves: List[Dict[str, Any]] = field(default_factory=list)
    search_fit_issues: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class KernelPosterior:
    """
    Sufficient statistics of psi^t_l(i) for one E-step.

    scatter[i, m] is the psi-weighted sum over (t, l != t) of d d^T, where
    d is the difference between the full conditioning row of variable m
    (x_m, every other variable, lags 1..P* of x_m) at time t and at center l.
    psi is the dense (T+1-P*, L+1-P*, N) array, kept only on request.
    """
    gamma_sums: np.ndarray
    omega_counts: np.ndarray
    scatter: np.ndarray
    p_star: int
    last_index: int
    psi: Optional[np.ndarray] = None

    @property
    def n_vars(self) -> int:
        return self.scatter.shape[1]

    @classmethod
    def from_dense(cls, psi: np.ndarray, model: KdeAsHmmModel, series: TimeSeries) -> "KernelPosterior":
        """Statistics of an explicit psi array of shape (T+1-P*, L+1-P*, N)."""
        n_rows = series.n_rows - model.p_star
        if psi.shape != (n_rows, model.n_centers, model.n_states):
            raise InvariantError(f"psi has shape {psi.shape}, expected "
                                 f"{(n_rows, model.n_centers, model.n_states)}")
        designs = _centered_designs(model, series)
        counts = np.zeros((model.n_states, model.n_centers))
        width = designs[0][0].shape[1]
        scatter = np.zeros((model.n_states, model.n_vars, width, width))
        for i in range(model.n_states):
            counts[i] = psi[:, :, i].sum(axis=0)
            for m, (zt, zl) in enumerate(designs):
                scatter[i, m] = _block_scatter(psi[:, :, i], zt, zl)
        return cls(gamma_sums=psi.sum(axis=(0, 1)), omega_counts=counts, scatter=scatter,
                   p_star=model.p_star, last_index=series.last_index, psi=psi.copy())

    def blocks(self, state: int, var: int, parents: Sequence[int], ar_order: int):
        """(S_uu, s_ux, s_xx) for the given conditioning vector."""
        cols = design_columns(var, parents, ar_order, self.n_vars)
        s = self.scatter[state, var]
        return s[np.ix_(cols, cols)], s[cols, 0], s[0, 0]


def _centered_designs(model: KdeAsHmmModel, series: TimeSeries) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per variable, full designs at times t and centers l, shifted by the center mean."""
    out = []
    for m in range(model.n_vars):
        zt = full_design(series.values, m, model.p_star)
        zl = full_design(model.centers.values, m, model.p_star)
        shift = zl.mean(axis=0)
        out.append((zt - shift, zl - shift))
    return out


def _block_scatter(psi: np.ndarray, zt: np.ndarray, zl: np.ndarray) -> np.ndarray:
    """sum_{t,l} psi[t,l] (zt[t] - zl[l]) (zt[t] - zl[l])^T."""
    r = psi.sum(axis=1)
    c = psi.sum(axis=0)
    cross = psi @ zl
    return (zt.T @ (r[:, None] * zt) - zt.T @ cross - cross.T @ zt + zl.T @ (c[:, None] * zl))


def init_model(series: TimeSeries, n_states: int, p_star: int, seed: int,
               graph: Optional[ContextGraph] = None) -> KdeAsHmmModel:
    """
    Starting point for EM.

    Naive graphs (unless a graph is supplied, then with zero weights),
    Silverman bandwidths shared by every state, omega drawn from
    U[0.4, 0.6] and normalised, uniform pi, and A = normalise(999 I + 1/N).
    """
    if n_states < 1:
        raise InvariantError(f"Number of states must be >= 1, got {n_states}")
    if p_star < 0:
        raise InvariantError(f"P* must be >= 0, got {p_star}")
    series.require_length(p_star, extra=2)
    rng = np.random.default_rng(seed)
    n_centers = series.n_rows - p_star
    h = np.tile(_silverman_row(series), (n_states, 1))
    omega = rng.uniform(0.4, 0.6, size=(n_states, n_centers))
    omega /= omega.sum(axis=1, keepdims=True)
    a = DIAGONAL_WEIGHT * np.eye(n_states) + 1.0 / n_states
    a /= a.sum(axis=1, keepdims=True)
    if graph is None:
        graph = ContextGraph.naive(n_states, series.n_vars)
    if graph.n_states != n_states or graph.n_vars != series.n_vars:
        raise InvariantError("Supplied graph does not match the number of states / features")
    validate_graph(graph, p_star).raise_for_errors()
    model = KdeAsHmmModel(n_states=n_states, p_star=p_star, pi=np.full(n_states, 1.0 / n_states),
                          a=a, graph=graph.copy(), weights=KernelWeights.zeros(graph), h=h,
                          omega=omega, centers=series)
    logger.debug("Initialised %d-state model on %d rows", n_states, series.n_rows)
    return model


def _silverman_row(series: TimeSeries) -> np.ndarray:
    stds = series.values.std(axis=0, ddof=1)
    return np.array([silverman_bandwidth(float(s), series.n_rows) for s in stds])


def init_omega_from_labels(model: KdeAsHmmModel, labels: Sequence[Any],
                           mapping: Dict[str, int]) -> KdeAsHmmModel:
    """
    Supervised omega: 1 where the center's label maps to the state, 1e-5 elsewhere.

    labels may cover the whole training series (L+1 entries) or only
    instants P*..L.
    """
    labels = [str(v) for v in labels]
    if len(labels) == model.centers.n_rows:
        labels = labels[model.p_star:]
    if len(labels) != model.n_centers:
        raise InvariantError(f"{len(labels)} labels for {model.n_centers} center instants")
    try:
        states = np.array([int(mapping[label]) for label in labels])
    except KeyError as e:
        raise InvariantError(f"Label {e.args[0]!r} has no state mapping")
    if np.any(states < 0) or np.any(states >= model.n_states):
        raise InvariantError("Label mapping refers to a state outside the model")
    omega = np.full((model.n_states, model.n_centers), LABEL_OFF_WEIGHT)
    omega[states, np.arange(model.n_centers)] = 1.0
    omega /= omega.sum(axis=1, keepdims=True)
    new = model.copy()
    new.omega = omega
    return new


def e_step(model: KdeAsHmmModel, series: TimeSeries, block_size: int = 256, threads: int = 1,
           keep_psi: bool = False) -> Tuple[Posteriors, KernelPosterior]:
    """Training-mode E-step (self-exclusion on): posteriors plus psi statistics."""
    model.check_series(series, exclude_self=True)
    log_pi, log_a = _log_params(model.pi, model.a)
    log_b = log_emission_matrix(model, series, True, block_size, threads)
    post = forward_backward_from_log_emissions(log_pi, log_a, log_b)
    designs = _centered_designs(model, series)
    n_rows = log_b.shape[0]

    def one_state(i: int):
        ot, ol = kernel_offsets(model, i, series)
        counts = np.zeros(model.n_centers)
        scatter = np.zeros((model.n_vars,) + (designs[0][0].shape[1],) * 2)
        dense = np.zeros((n_rows, model.n_centers)) if keep_psi else None
        for start in range(0, n_rows, block_size):
            stop = min(start + block_size, n_rows)
            block = state_log_joint_block(model, i, ot, ol, start, stop, exclude_self=True)
            lb = log_b[start:stop, i]
            alive = np.isfinite(lb)
            psi = np.zeros_like(block)
            psi[alive] = np.exp(block[alive] - lb[alive, None]) * post.gamma[start:stop, i][alive, None]
            counts += psi.sum(axis=0)
            for m, (zt, zl) in enumerate(designs):
                scatter[m] += _block_scatter(psi, zt[start:stop], zl)
            if keep_psi:
                dense[start:stop] = psi
        return counts, scatter, dense

    results = map_states(one_state, model.n_states, threads)
    kpost = KernelPosterior(
        gamma_sums=post.gamma.sum(axis=0),
        omega_counts=np.stack([r[0] for r in results]),
        scatter=np.stack([r[1] for r in results]),
        p_star=model.p_star, last_index=series.last_index,
        psi=np.stack([r[2] for r in results], axis=2) if keep_psi else None)
    return post, kpost


def solve_weight_system(suu: np.ndarray, sux: np.ndarray, warn: bool = True) -> Tuple[np.ndarray, bool]:
    """Solve suu w = sux; returns (w, ridge_used). Ill-conditioned systems get a ridge."""
    if suu.shape != (sux.size, sux.size):
        raise InvariantError(f"Normal matrix {suu.shape} does not match right-hand side {sux.shape}")
    try:
        if np.linalg.cond(suu) < MAX_CONDITION:
            return scipy.linalg.solve(suu, sux, assume_a="pos"), False
    except (LinAlgError, ValueError):
        pass
    dim = sux.size
    trace = float(np.trace(suu))
    if not trace > 0:
        if warn:
            warnings.warn("Kernel-weight system is identically zero; weights set to zero",
                          RidgeFallbackWarning, stacklevel=3)
        return np.zeros(dim), True
    ridge = RIDGE_FACTOR * trace / dim
    if warn:
        warnings.warn(f"Singular kernel-weight system; ridge {ridge:.3g} added",
                      RidgeFallbackWarning, stacklevel=3)
    return scipy.linalg.solve(suu + ridge * np.eye(dim), sux, assume_a="sym"), True


def m_step_weights(kernel_posterior: KernelPosterior, graph: ContextGraph, state: int, var: int) -> np.ndarray:
    """
    Kernel-weight row M_im solving
    [sum psi u_bar^T u_bar] M^T = sum psi u_bar^T x_bar
    by a direct symmetric solve (ridge fallback when singular).
    """
    if graph.dimension(state, var) == 0:
        return np.zeros(0)
    suu, sux, _ = kernel_posterior.blocks(state, var, graph.parents[state][var], graph.ar_order[state][var])
    return solve_weight_system(suu, sux)[0]


def weighted_residual(kernel_posterior: KernelPosterior, graph: ContextGraph, weights_row: np.ndarray,
                      state: int, var: int) -> float:
    """sum_t sum_{l != t} psi (x^t_m - mu^t_lim)^2 under the given weights."""
    suu, sux, sxx = kernel_posterior.blocks(state, var, graph.parents[state][var], graph.ar_order[state][var])
    w = np.asarray(weights_row, dtype=float)
    if w.size != sux.size:
        raise InvariantError(f"Weight row of length {w.size} for a conditioning vector of length {sux.size}")
    value = sxx - 2.0 * w @ sux + w @ suu @ w
    return max(float(value), 0.0)


def fit_bandwidth(kernel_posterior: KernelPosterior, graph: ContextGraph, weights_row: np.ndarray,
                  state: int, var: int, floor: float, warn: bool = True) -> Tuple[float, bool]:
    mass = float(kernel_posterior.gamma_sums[state])
    if mass <= STARVATION_MASS:
        raise StateStarvationError(state)
    deviation = weighted_residual(kernel_posterior, graph, weights_row, state, var)
    h = float(np.sqrt(deviation / mass))
    clamped = h < floor
    if clamped:
        h = floor
        if warn:
            warnings.warn(f"Bandwidth of state {state}, variable {var} clamped to the floor {floor:.3g}",
                          BandwidthFloorWarning, stacklevel=3)
    if warn and not h < np.sqrt(3.0 * deviation / mass):
        warnings.warn(f"Bandwidth of state {state}, variable {var} violates the local-maximum condition",
                      LocalMaximumWarning, stacklevel=3)
    return h, clamped


def m_step_bandwidth(kernel_posterior: KernelPosterior, graph: ContextGraph, weights_row: np.ndarray,
                     state: int, var: int, floor: float) -> float:
    """h_im = sqrt(sum psi (x - mu_hat)^2 / sum gamma), with mu_hat from the fresh weights."""
    return fit_bandwidth(kernel_posterior, graph, weights_row, state, var, floor)[0]


def m_step_omega(kernel_posterior: KernelPosterior, state: int) -> np.ndarray:
    """omega_il = sum_t psi^t_l(i) / sum_t gamma^t(i), epsilon-smoothed."""
    mass = float(kernel_posterior.gamma_sums[state])
    if mass <= STARVATION_MASS:
        raise StateStarvationError(state)
    row = kernel_posterior.omega_counts[state] / mass + OMEGA_EPSILON
    return row / row.sum()


def _transitions(posteriors: Posteriors) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    gamma, zeta = posteriors.gamma, posteriors.zeta
    n = gamma.shape[1]
    pi = gamma[0] / gamma[0].sum()
    counts = zeta.sum(axis=0)
    mass = gamma[:-1].sum(axis=0)
    a = np.empty((n, n))
    starved = []
    for i in range(n):
        if mass[i] <= STARVATION_MASS:
            starved.append(i)
            a[i] = 1.0 / n
        else:
            a[i] = counts[i] / mass[i]
            a[i] /= a[i].sum()
    return pi, a, starved


def m_step_transitions(posteriors: Posteriors) -> Tuple[np.ndarray, np.ndarray]:
    """Standard Baum-Welch update of pi and A; starved rows reset to uniform."""
    pi, a, starved = _transitions(posteriors)
    for i in starved:
        warnings.warn(f"State {i} has no transition mass; its row of A reset to uniform",
                      StateStarvationWarning, stacklevel=2)
    return pi, a


def m_step(model: KdeAsHmmModel, posteriors: Posteriors,
           kernel_posterior: KernelPosterior) -> Tuple[KdeAsHmmModel, bool]:
    """
    All closed-form updates. Returns the new model and whether every
    update was the exact maximiser (no floor, ridge or reset).
    """
    new = model.copy()
    new.pi, new.a = m_step_transitions(posteriors)
    exact = len(_transitions(posteriors)[2]) == 0
    floors = model.bandwidth_floors()
    for i in range(model.n_states):
        if kernel_posterior.gamma_sums[i] <= STARVATION_MASS:
            warnings.warn(f"State {i} starved; omega reset to uniform and h to Silverman",
                          StateStarvationWarning, stacklevel=2)
            new.omega[i] = 1.0 / model.n_centers
            new.h[i] = _silverman_row(model.centers)
            exact = False
            continue
        new.omega[i] = m_step_omega(kernel_posterior, i)
        for m in range(model.n_vars):
            if model.graph.dimension(i, m):
                suu, sux, _ = kernel_posterior.blocks(i, m, model.graph.parents[i][m],
                                                      model.graph.ar_order[i][m])
                w, ridge = solve_weight_system(suu, sux)
                new.weights.rows[i][m] = w
                exact = exact and not ridge
            h, clamped = fit_bandwidth(kernel_posterior, model.graph, new.weights.rows[i][m], i, m, floors[m])
            new.h[i, m] = h
            exact = exact and not clamped
    return new, exact


def expected_complete_log_likelihood(model: KdeAsHmmModel, series: TimeSeries, posteriors: Posteriors,
                                     psi: np.ndarray) -> float:
    """
    Auxiliary function Q(model | previous) for fixed posteriors and a
    dense psi; used to check that M-step updates are stationary points.
    """
    with np.errstate(divide="ignore"):
        total = float(np.sum(posteriors.gamma[0] * np.log(model.pi)))
        log_a = np.log(model.a)
    if posteriors.zeta.shape[0]:
        total += float(np.sum(np.where(posteriors.zeta > 0, posteriors.zeta * log_a[None], 0.0)))
    n_rows = series.n_rows - model.p_star
    for i in range(model.n_states):
        ot, ol = kernel_offsets(model, i, series)
        terms = state_log_joint_block(model, i, ot, ol, 0, n_rows, exclude_self=True)
        weights = psi[:, :, i]
        total += float(np.sum(np.where(weights > 0, weights * terms, 0.0)))
    return total


def em_fit(series: TimeSeries, config: TrainConfig,
           model: Optional[KdeAsHmmModel] = None) -> Tuple[KdeAsHmmModel, FitReport]:
    """
    Fit all parameters by EM under a fixed graph.

    Args:
        series: training series y^{0:L}
        config: training settings
        model: starting model; initialised from config when None

    Returns:
        (trained model, FitReport)
    """
    started = time.perf_counter()
    if model is None:
        model = init_model(series, config.n_states, config.p_star, config.seed, config.graph)
        if config.label_mapping is not None and series.state_labels is not None:
            model = init_omega_from_labels(model, series.state_labels, config.label_mapping)
    validate_graph(model.graph, model.p_star).raise_for_errors()

    n_scored = series.n_rows - model.p_star
    report = FitReport()
    last_exact = True
    # one extra E-step scores the model left by the last M-step
    passes = config.max_iter + 1 if config.max_iter > 0 else 0
    for iteration in range(passes):
        posteriors, kernel_posterior = e_step(model, series, config.block_size, config.threads)
        value = posteriors.loglik / n_scored
        if report.loglik_per_datum:
            previous = report.loglik_per_datum[-1]
            if value < previous - MONOTONE_SLACK * abs(previous):
                message = (f"EM iteration {iteration + 1} decreased the log-likelihood per datum "
                           f"from {previous:.12g} to {value:.12g}")
                if last_exact:
                    raise NonMonotoneError(message)
                logger.warning("%s (previous M-step was not exact)", message)
        report.loglik_per_datum.append(value)
        logger.info("EM iteration %d: log-likelihood per datum %.6f", iteration + 1, value)
        if len(report.loglik_per_datum) >= 2:
            previous = report.loglik_per_datum[-2]
            if abs(value - previous) <= config.rel_tol * abs(previous):
                report.converged = True
                break
        if iteration == config.max_iter:
            break
        model, last_exact = m_step(model, posteriors, kernel_posterior)

    report.iterations = len(report.loglik_per_datum)
    report.wall_time_s = time.perf_counter() - started
    logger.info("EM finished after %d iterations (converged=%s)", report.iterations, report.converged)
    return model, report
