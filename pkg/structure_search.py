"""
Structural EM: penalised per-(state, variable) scores and greedy-forward
growth of parent sets and AR orders under fixed kernel posteriors.
"""

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np

from em_trainer import (STARVATION_MASS, FitReport, KernelPosterior, TrainConfig, e_step,
                        em_fit, fit_bandwidth, solve_weight_system, weighted_residual)
from errors import InvariantError
from kernel_math import LOG_SQRT_2PI
from model_core import ContextGraph, KdeAsHmmModel, TimeSeries, validate_graph

logger = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-9


class Variant(str, Enum):
    """Which move kinds the search may use."""
    KDE_HMM = "kde-hmm"
    KDE_AR = "kde-ar"
    KDE_BN = "kde-bn"
    KDE_AS = "kde-as"

    @property
    def allows_parents(self) -> bool:
        return self in (Variant.KDE_BN, Variant.KDE_AS)

    @property
    def allows_ar(self) -> bool:
        return self in (Variant.KDE_AR, Variant.KDE_AS)

    @property
    def searches(self) -> bool:
        return self.allows_parents or self.allows_ar


@dataclass(frozen=True)
class SearchMove:
    kind: str
    state: int
    var: int
    parent: Optional[int] = None

    def apply(self, graph: ContextGraph) -> ContextGraph:
        if self.kind == "add-parent":
            return graph.with_parent(self.state, self.var, self.parent)
        if self.kind == "increment-ar":
            return graph.with_ar_increment(self.state, self.var)
        raise InvariantError(f"Unknown move kind {self.kind!r}")

    def describe(self, names: Optional[Tuple[str, ...]] = None) -> str:
        label = (lambda v: names[v]) if names else str
        if self.kind == "add-parent":
            return f"state {self.state}: {label(self.parent)} -> {label(self.var)}"
        return f"state {self.state}: AR order of {label(self.var)} + 1"


@dataclass
class StructureScore:
    fit: float
    penalty: float
    total: float
    state: int
    var: int
    kappa: int
    p: int


@dataclass
class SearchResult:
    """Updated model, accepted moves, per-(state, var) score traces and scratch-fit issue counts."""
    model: KdeAsHmmModel
    moves: List[Dict[str, Any]] = field(default_factory=list)
    score_traces: Dict[Tuple[int, int], List[float]] = field(default_factory=dict)
    fit_issues: Counter = field(default_factory=Counter)


def structure_penalty(kappa: int, p: int, last_index: int, p_star: int) -> float:
    """1/2 (kappa + p + T + 1 - P*) ln T."""
    if last_index < 1:
        raise InvariantError(f"Penalty needs T >= 1, got {last_index}")
    return 0.5 * (kappa + p + last_index + 1 - p_star) * math.log(last_index)


def score_variable(kernel_posterior: KernelPosterior, graph: ContextGraph, weights_row: np.ndarray,
                   h: float, state: int, var: int, bandwidth_term: bool = True) -> StructureScore:
    """
    Penalised score of variable var in state state.

    fit is sum_t sum_{l != t} psi ln K(z), plus -ln h per unit of psi mass
    when bandwidth_term is set.
    """
    if not h > 0:
        raise InvariantError(f"Bandwidth must be positive, got {h}")
    mass = float(kernel_posterior.gamma_sums[state])
    deviation = weighted_residual(kernel_posterior, graph, weights_row, state, var)
    fit = -mass * LOG_SQRT_2PI - deviation / (2.0 * h * h)
    if bandwidth_term:
        fit -= mass * math.log(h)
    kappa = graph.kappa(state, var)
    p = graph.ar_order[state][var]
    penalty = structure_penalty(kappa, p, kernel_posterior.last_index, kernel_posterior.p_star)
    return StructureScore(fit=fit, penalty=penalty, total=fit - penalty, state=state, var=var,
                          kappa=kappa, p=p)


def refit_variable(kernel_posterior: KernelPosterior, graph: ContextGraph, state: int, var: int,
                   floor: float, issues: Optional[Counter] = None) -> Tuple[np.ndarray, float]:
    """
    M-step for one (state, var) under fixed psi. Scratch fits raise no
    warnings; ridge fallbacks and floored bandwidths are counted in issues.
    """
    ridge = False
    if graph.dimension(state, var):
        suu, sux, _ = kernel_posterior.blocks(state, var, graph.parents[state][var],
                                              graph.ar_order[state][var])
        w, ridge = solve_weight_system(suu, sux, warn=False)
    else:
        w = np.zeros(0)
    h, clamped = fit_bandwidth(kernel_posterior, graph, w, state, var, floor, warn=False)
    if issues is not None:
        issues["ridge"] += int(ridge)
        issues["bandwidth-floor"] += int(clamped)
    return w, h


def legal_moves(graph: ContextGraph, state: int, var: int, p_star: int,
                variant: Variant) -> List[SearchMove]:
    """Candidate moves in enumeration order: parents by index, then the AR increment."""
    moves = []
    if variant.allows_parents:
        dag = graph.state_digraph(state)
        current = set(graph.parents[state][var])
        for v in range(graph.n_vars):
            if v == var or v in current:
                continue
            if nx.has_path(dag, var, v):
                continue
            moves.append(SearchMove("add-parent", state, var, v))
    if variant.allows_ar and graph.ar_order[state][var] < p_star:
        moves.append(SearchMove("increment-ar", state, var))
    return moves


def greedy_forward_search(model: KdeAsHmmModel, series: TimeSeries, kernel_posterior: KernelPosterior,
                          per_state_budget: Optional[int] = None, variant: Variant = Variant.KDE_AS,
                          bandwidth_term: bool = True) -> SearchResult:
    """
    Grow each state's graph one best-improving move at a time.

    States and variables are swept in index order. For each candidate the
    (weights, bandwidth) pair of the touched variable is refit under the
    fixed psi statistics; the best candidate is accepted when it beats the
    current total by more than IMPROVEMENT_THRESHOLD. Ties keep the first
    candidate in enumeration order.
    """
    variant = Variant(variant)
    if kernel_posterior.last_index != series.last_index:
        raise InvariantError("Kernel posterior was computed on a different series")
    if per_state_budget is not None and per_state_budget < 0:
        raise InvariantError(f"per_state_budget must be >= 0, got {per_state_budget}")
    new = model.copy()
    graph = new.graph
    floors = model.bandwidth_floors()
    result = SearchResult(model=new)
    for i in range(model.n_states):
        accepted = 0
        if kernel_posterior.gamma_sums[i] <= STARVATION_MASS:
            logger.debug("Skipping starved state %d", i)
            continue
        for m in range(model.n_vars):
            if per_state_budget is not None and accepted >= per_state_budget:
                break
            w, h = refit_variable(kernel_posterior, graph, i, m, floors[m], result.fit_issues)
            current = score_variable(kernel_posterior, graph, w, h, i, m, bandwidth_term)
            trace = [current.total]
            changed = False
            while per_state_budget is None or accepted < per_state_budget:
                best = None
                for move in legal_moves(graph, i, m, model.p_star, variant):
                    candidate = move.apply(graph)
                    cw, ch = refit_variable(kernel_posterior, candidate, i, m, floors[m],
                                            result.fit_issues)
                    score = score_variable(kernel_posterior, candidate, cw, ch, i, m, bandwidth_term)
                    if best is None or score.total > best[1].total:
                        best = (move, score, candidate, cw, ch)
                if best is None or not best[1].total > current.total + IMPROVEMENT_THRESHOLD:
                    break
                move, current, graph, w, h = best
                validate_graph(graph, model.p_star).raise_for_errors()
                accepted += 1
                changed = True
                trace.append(current.total)
                result.moves.append({"kind": move.kind, "state": i, "var": m, "parent": move.parent,
                                     "total": current.total})
                logger.info("Accepted move %s (score %.4f)", move.describe(model.feature_names),
                            current.total)
            if changed:
                new.weights.rows[i][m] = w
                new.h[i, m] = h
            result.score_traces[(i, m)] = trace
    new.graph = graph
    new.validate()
    issues = +result.fit_issues
    if issues:
        logger.info("Scratch fits during search: %s", dict(sorted(issues.items())))
    return result


def sem_fit(series: TimeSeries, config: TrainConfig) -> Tuple[KdeAsHmmModel, FitReport]:
    """
    Structural EM: em_fit, then per round a greedy search under fresh
    posteriors followed by em_fit again. A round without accepted moves
    ends the rounds.
    """
    started = time.perf_counter()
    variant = Variant(config.variant)
    model, report = em_fit(series, config)
    rounds = config.sem_rounds if variant.searches else 0
    for r in range(rounds):
        _, kernel_posterior = e_step(model, series, config.block_size, config.threads)
        result = greedy_forward_search(model, series, kernel_posterior, config.per_state_budget,
                                       variant, config.bandwidth_term)
        for kind, count in sorted(result.fit_issues.items()):
            if count:
                report.search_fit_issues[kind] = report.search_fit_issues.get(kind, 0) + count
        if not result.moves:
            logger.info("SEM round %d accepted no move; stopping", r + 1)
            break
        logger.info("SEM round %d accepted %d moves", r + 1, len(result.moves))
        for move in result.moves:
            move["round"] = r + 1
        report.moves.extend(result.moves)
        model, refit = em_fit(series, config, model=result.model)
        report.round_starts.append(len(report.loglik_per_datum))
        report.loglik_per_datum.extend(refit.loglik_per_datum)
        report.iterations += refit.iterations
        report.converged = refit.converged
    report.wall_time_s = time.perf_counter() - started
    return model, report
