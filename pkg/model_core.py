"""
Model core for kernel-density asymmetric HMMs.

Holds the observation record, the per-state dependency graphs, the kernel
weights and the full parameter set, together with kernel-center and
emission-density computation and the versioned JSON model format.
"""

import copy
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy.special import logsumexp

from errors import (GraphCycleError, InvariantError, ModelFormatError,
                    ZeroEmissionWarning)
from kernel_math import bandwidth_floor, log_gaussian_kernel

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
MODEL_TYPE = "kde-ashmm"
CONDITIONING_ORDER = "parents-then-ar-lags"
SUM_TOLERANCE = 1e-12


@dataclass
class TimeSeries:
    """Rectangular real-valued record: T+1 rows by M named features."""
    values: np.ndarray
    feature_names: Tuple[str, ...]
    state_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        if self.values.ndim != 2:
            raise InvariantError(f"Series values must be a 2-D table, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.argwhere(~np.isfinite(self.values))[0][0])
            raise InvariantError(f"Series contains a non-finite value (first at row {bad})")
        self.feature_names = tuple(str(n) for n in self.feature_names)
        if len(self.feature_names) != self.values.shape[1]:
            raise InvariantError(
                f"{len(self.feature_names)} feature names for {self.values.shape[1]} columns")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise InvariantError("Feature names must be unique")
        if self.state_labels is not None:
            self.state_labels = np.asarray(self.state_labels).astype(str)
            if self.state_labels.shape != (self.values.shape[0],):
                raise InvariantError("State labels must have one entry per row")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def last_index(self) -> int:
        """T for a record x^{0:T}."""
        return self.values.shape[0] - 1

    def require_length(self, p_star: int, extra: int = 1) -> None:
        if self.n_rows < p_star + extra:
            raise InvariantError(
                f"Series has {self.n_rows} rows; at least P*+{extra} = {p_star + extra} are required")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, label_column: Optional[str] = None) -> "TimeSeries":
        labels = None
        if label_column is not None:
            labels = frame[label_column].astype(str).to_numpy()
            frame = frame.drop(columns=[label_column])
        return cls(values=frame.to_numpy(dtype=float), feature_names=tuple(frame.columns),
                   state_labels=labels)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.feature_names))


@dataclass
class ContextGraph:
    """
    Per-state dependency structure.

    parents[i][m] lists the within-time parents of variable m in state i in
    declared order; ar_order[i][m] is the number of own lags used.
    """
    parents: List[List[List[int]]]
    ar_order: List[List[int]]

    @classmethod
    def naive(cls, n_states: int, n_vars: int) -> "ContextGraph":
        return cls(parents=[[[] for _ in range(n_vars)] for _ in range(n_states)],
                   ar_order=[[0] * n_vars for _ in range(n_states)])

    @property
    def n_states(self) -> int:
        return len(self.parents)

    @property
    def n_vars(self) -> int:
        return len(self.parents[0]) if self.parents else 0

    def kappa(self, state: int, var: int) -> int:
        return len(self.parents[state][var])

    def dimension(self, state: int, var: int) -> int:
        """Length of the conditioning vector, kappa + p."""
        return len(self.parents[state][var]) + self.ar_order[state][var]

    def n_arcs(self, state: int) -> int:
        return sum(len(p) for p in self.parents[state])

    def is_naive(self) -> bool:
        return all(not p for row in self.parents for p in row) and \
            all(r == 0 for row in self.ar_order for r in row)

    def state_digraph(self, state: int) -> nx.DiGraph:
        """Within-time arcs of one state; AR arcs point back in time and are left out."""
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n_vars))
        for m, parents in enumerate(self.parents[state]):
            g.add_edges_from((v, m) for v in parents)
        return g

    def with_parent(self, state: int, var: int, parent: int) -> "ContextGraph":
        new = self.copy()
        new.parents[state][var].append(parent)
        return new

    def with_ar_increment(self, state: int, var: int) -> "ContextGraph":
        new = self.copy()
        new.ar_order[state][var] += 1
        return new

    def copy(self) -> "ContextGraph":
        return ContextGraph(parents=copy.deepcopy(self.parents), ar_order=copy.deepcopy(self.ar_order))

    def to_dict(self) -> Dict[str, Any]:
        return {"parents": [[list(map(int, p)) for p in row] for row in self.parents],
                "ar_order": [[int(r) for r in row] for row in self.ar_order],
                "conditioning_order": CONDITIONING_ORDER}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ContextGraph":
        if "graph" in data:
            data = data["graph"]
        try:
            parents = [[[int(v) for v in p] for p in row] for row in data["parents"]]
            ar_order = [[int(r) for r in row] for row in data["ar_order"]]
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"Malformed graph document: {e}")
        if len(parents) != len(ar_order) or any(len(a) != len(b) for a, b in zip(parents, ar_order)):
            raise ModelFormatError("Graph parents and ar_order shapes disagree")
        return cls(parents=parents, ar_order=ar_order)


@dataclass
class GraphValidation:
    """Outcome of validate_graph: ok, or a list of problems and cycles."""
    ok: bool
    cycles: List[Tuple[int, List[int]]] = field(default_factory=list)
    problems: List[str] = field(default_factory=list)

    def raise_for_errors(self) -> None:
        if self.cycles:
            raise GraphCycleError(self.cycles)
        if self.problems:
            raise InvariantError("; ".join(self.problems))


def validate_graph(graph: ContextGraph, p_star: Optional[int] = None) -> GraphValidation:
    """
    Check every state's within-time arcs for cycles, plus index sanity.

    AR arcs always point backwards in time and never create a cycle, so
    only the orders' range is checked (when p_star is given).
    """
    problems = []
    cycles = []
    n_vars = graph.n_vars
    for i in range(graph.n_states):
        for m, parents in enumerate(graph.parents[i]):
            if len(set(parents)) != len(parents):
                problems.append(f"state {i}, variable {m}: duplicate parents")
            for v in parents:
                if not 0 <= v < n_vars:
                    problems.append(f"state {i}, variable {m}: parent {v} out of range")
                elif v == m:
                    problems.append(f"state {i}, variable {m}: variable is its own parent")
            order = graph.ar_order[i][m]
            if order < 0 or (p_star is not None and order > p_star):
                problems.append(f"state {i}, variable {m}: AR order {order} outside [0, {p_star}]")
        if problems:
            continue
        try:
            cycle = nx.find_cycle(graph.state_digraph(i))
        except nx.NetworkXNoCycle:
            continue
        cycles.append((i, [u for u, _ in cycle] + [cycle[0][0]]))
    return GraphValidation(ok=not problems and not cycles, cycles=cycles, problems=problems)


@dataclass
class KernelWeights:
    """rows[i][m]: weights over the conditioning vector, parents first then lags 1..p."""
    rows: List[List[np.ndarray]]

    @classmethod
    def zeros(cls, graph: ContextGraph) -> "KernelWeights":
        return cls(rows=[[np.zeros(graph.dimension(i, m)) for m in range(graph.n_vars)]
                         for i in range(graph.n_states)])

    def check(self, graph: ContextGraph) -> None:
        for i in range(graph.n_states):
            for m in range(graph.n_vars):
                w = self.rows[i][m]
                if w.shape != (graph.dimension(i, m),):
                    raise InvariantError(
                        f"Kernel weights for state {i}, variable {m} have length {w.size}, "
                        f"expected {graph.dimension(i, m)}")
                if not np.all(np.isfinite(w)):
                    raise InvariantError(f"Kernel weights for state {i}, variable {m} are not finite")

    def copy(self) -> "KernelWeights":
        return KernelWeights(rows=[[w.copy() for w in row] for row in self.rows])


def conditioning_vectors(values: np.ndarray, var: int, parents: Sequence[int],
                         ar_order: int, p_star: int) -> np.ndarray:
    """Rows u^t for t = P*..T: parents at time t, then x_var at t-1..t-p."""
    n = values.shape[0]
    cols = [values[p_star:, v] for v in parents]
    cols += [values[p_star - r:n - r, var] for r in range(1, ar_order + 1)]
    if not cols:
        return np.empty((n - p_star, 0))
    return np.column_stack(cols)


def full_design(values: np.ndarray, var: int, p_star: int) -> np.ndarray:
    """
    Rows (x_var, every other variable, lags 1..P* of x_var) for t = P*..T.

    Any candidate conditioning vector of var is a column subset of this
    design; see design_columns.
    """
    n, n_vars = values.shape
    others = [v for v in range(n_vars) if v != var]
    cols = [values[p_star:, var]] + [values[p_star:, v] for v in others]
    cols += [values[p_star - r:n - r, var] for r in range(1, p_star + 1)]
    return np.column_stack(cols)


def design_columns(var: int, parents: Sequence[int], ar_order: int, n_vars: int) -> List[int]:
    """Columns of full_design making up the conditioning vector (column 0 is x_var)."""
    cols = [1 + (v if v < var else v - 1) for v in parents]
    cols += [n_vars + r - 1 for r in range(1, ar_order + 1)]
    return cols


@dataclass
class KdeAsHmmModel:
    """Parameter set {pi, A, h, omega, M} with graph and retained training centers."""
    n_states: int
    p_star: int
    pi: np.ndarray
    a: np.ndarray
    graph: ContextGraph
    weights: KernelWeights
    h: np.ndarray
    omega: np.ndarray
    centers: TimeSeries

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)

    @property
    def n_vars(self) -> int:
        return self.centers.n_vars

    @property
    def feature_names(self) -> Tuple[str, ...]:
        return self.centers.feature_names

    @property
    def n_centers(self) -> int:
        """L + 1 - P*: center instants P*..L."""
        return self.centers.n_rows - self.p_star

    def bandwidth_floors(self) -> np.ndarray:
        stds = self.centers.values.std(axis=0, ddof=1)
        return np.array([bandwidth_floor(s) for s in stds])

    def validate(self) -> None:
        """Raise InvariantError on any violated parameter invariant."""
        n, m = self.n_states, self.n_vars
        if n < 1:
            raise InvariantError("Model needs at least one state")
        if self.p_star < 0:
            raise InvariantError("P* must be nonnegative")
        self.centers.require_length(self.p_star, extra=1)
        if self.pi.shape != (n,) or self.a.shape != (n, n):
            raise InvariantError("pi / A shapes do not match the number of states")
        if self.h.shape != (n, m) or self.omega.shape != (n, self.n_centers):
            raise InvariantError("h / omega shapes do not match the model dimensions")
        for name, arr in (("pi", self.pi), ("A", self.a), ("omega", self.omega)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise InvariantError(f"{name} must contain finite nonnegative values")
        if abs(self.pi.sum() - 1.0) > SUM_TOLERANCE:
            raise InvariantError(f"pi sums to {self.pi.sum()!r}, not 1")
        for label, mat in (("A", self.a), ("omega", self.omega)):
            sums = mat.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > SUM_TOLERANCE)[0]
            if bad.size:
                raise InvariantError(f"Row {int(bad[0])} of {label} sums to {sums[bad[0]]!r}, not 1")
        if not np.all(np.isfinite(self.h)) or np.any(self.h <= 0):
            raise InvariantError("Bandwidths must be finite and positive")
        if self.graph.n_states != n or self.graph.n_vars != m:
            raise InvariantError("Graph dimensions do not match the model")
        validate_graph(self.graph, self.p_star).raise_for_errors()
        self.weights.check(self.graph)

    def check_series(self, series: TimeSeries, exclude_self: bool = False) -> None:
        if series.n_vars != self.n_vars:
            raise InvariantError(f"Series has {series.n_vars} features, model expects {self.n_vars}")
        series.require_length(self.p_star, extra=1)
        if exclude_self and series.n_rows != self.centers.n_rows:
            raise InvariantError("Self-exclusion requires the training series itself")

    def log_emissions(self, series: TimeSeries, exclude_self: bool = False,
                      block_size: int = 256, threads: int = 1) -> np.ndarray:
        return log_emission_matrix(self, series, exclude_self, block_size, threads)

    def copy(self) -> "KdeAsHmmModel":
        return KdeAsHmmModel(n_states=self.n_states, p_star=self.p_star, pi=self.pi.copy(),
                             a=self.a.copy(), graph=self.graph.copy(), weights=self.weights.copy(),
                             h=self.h.copy(), omega=self.omega.copy(), centers=self.centers)


def map_states(fn: Callable[[int], Any], n_states: int, threads: int = 1) -> List[Any]:
    """Apply fn to every state index; results come back in state order."""
    if threads <= 1 or n_states == 1:
        return [fn(i) for i in range(n_states)]
    with ThreadPoolExecutor(max_workers=min(threads, n_states)) as pool:
        return list(pool.map(fn, range(n_states)))


def kernel_offsets(model: KdeAsHmmModel, state: int, series: TimeSeries) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split x^t_m - mu^t_lim into a time part and a center part.

    x^t_m - mu^t_lim = (x^t_m - M_im u^t) - (y^l_m - M_im v^l), so the
    returned arrays (T+1-P*, M) and (L+1-P*, M) give every kernel argument
    by one broadcast subtraction.
    """
    p = model.p_star
    x, y = series.values, model.centers.values
    ot = x[p:, :].copy()
    ol = y[p:, :].copy()
    for m in range(model.n_vars):
        w = model.weights.rows[state][m]
        if w.size == 0:
            continue
        parents = model.graph.parents[state][m]
        order = model.graph.ar_order[state][m]
        ot[:, m] -= conditioning_vectors(x, m, parents, order, p) @ w
        ol[:, m] -= conditioning_vectors(y, m, parents, order, p) @ w
    return ot, ol


def state_log_joint_block(model: KdeAsHmmModel, state: int, ot: np.ndarray, ol: np.ndarray,
                          start: int, stop: int, exclude_self: bool) -> np.ndarray:
    """ln(omega_il) + sum_m ln((1/h_im) K(z)) for rows start..stop-1 (time index t - P*)."""
    h = model.h[state]
    z = (ot[start:stop, None, :] - ol[None, :, :]) / h
    terms = log_gaussian_kernel(z).sum(axis=2) - np.log(h).sum()
    with np.errstate(divide="ignore"):
        terms += np.log(model.omega[state])[None, :]
    if exclude_self:
        rows = np.arange(start, stop)
        inside = rows < ol.shape[0]
        terms[np.nonzero(inside)[0], rows[inside]] = -np.inf
    return terms


def log_emission_matrix(model: KdeAsHmmModel, series: TimeSeries, exclude_self: bool = False,
                        block_size: int = 256, threads: int = 1) -> np.ndarray:
    """ln b_i(x^t) for t = P*..T and every state, shape (T+1-P*, N)."""
    model.check_series(series, exclude_self)
    n_rows = series.n_rows - model.p_star

    def one_state(i: int) -> np.ndarray:
        ot, ol = kernel_offsets(model, i, series)
        out = np.empty(n_rows)
        for start in range(0, n_rows, block_size):
            stop = min(start + block_size, n_rows)
            block = state_log_joint_block(model, i, ot, ol, start, stop, exclude_self)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[start:stop] = logsumexp(block, axis=1)
        return out

    log_b = np.column_stack(map_states(one_state, model.n_states, threads))
    if np.any(np.isneginf(log_b)):
        warnings.warn("Emission density is zero for some (state, time) pairs",
                      ZeroEmissionWarning, stacklevel=2)
    return log_b


def kernel_center(model: KdeAsHmmModel, state: int, var: int, center_index: int,
                  t: int, series: TimeSeries) -> float:
    """mu^t_{l,i,m} = y^l_m + M_im (u^t - v^l)."""
    p = model.p_star
    if not p <= t <= series.last_index:
        raise InvariantError(f"Time index {t} outside [{p}, {series.last_index}]")
    if not p <= center_index <= model.centers.last_index:
        raise InvariantError(f"Center index {center_index} outside [{p}, {model.centers.last_index}]")
    if not (0 <= state < model.n_states and 0 <= var < model.n_vars):
        raise InvariantError(f"State {state} / variable {var} out of range")
    y = model.centers.values
    w = model.weights.rows[state][var]
    if w.size == 0:
        return float(y[center_index, var])
    parents = model.graph.parents[state][var]
    order = model.graph.ar_order[state][var]
    u = conditioning_vectors(series.values[t - p:t + 1], var, parents, order, p)[0]
    v = conditioning_vectors(y[center_index - p:center_index + 1], var, parents, order, p)[0]
    return float(y[center_index, var] + w @ (u - v))


def emission_log_density(model: KdeAsHmmModel, state: int, t: int, series: TimeSeries,
                         exclude_self: bool = False) -> float:
    """
    ln b_i(x^t) as a log-sum over centers.

    With exclude_self the center at l = t is skipped and the remaining
    omega mass is not renormalised, matching the training convention.
    """
    if t < model.p_star or t > series.last_index:
        raise InvariantError(f"Time index {t} outside [{model.p_star}, {series.last_index}]")
    model.check_series(series, exclude_self)
    ot, ol = kernel_offsets(model, state, series)
    row = t - model.p_star
    block = state_log_joint_block(model, state, ot, ol, row, row + 1, exclude_self)[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        value = float(logsumexp(block))
    if value == -np.inf:
        warnings.warn(f"All mixture terms are zero for state {state} at t={t}",
                      ZeroEmissionWarning, stacklevel=2)
    return value


def model_to_dict(model: KdeAsHmmModel, provenance: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "model_type": MODEL_TYPE,
        "n_states": int(model.n_states),
        "p_star": int(model.p_star),
        "feature_names": list(model.feature_names),
        "pi": model.pi.tolist(),
        "a": model.a.tolist(),
        "graph": model.graph.to_dict(),
        "weights": [[w.tolist() for w in row] for row in model.weights.rows],
        "h": model.h.tolist(),
        "omega": model.omega.tolist(),
        "centers": {"n_rows": model.centers.n_rows, "n_cols": model.centers.n_vars,
                    "values": model.centers.values.reshape(-1).tolist()},
    }
    if provenance is not None:
        doc["provenance"] = provenance
    return doc


def model_from_dict(doc: Dict[str, Any]) -> KdeAsHmmModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("Model document must be a JSON object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version!r} "
                               f"(expected {MODEL_FORMAT_VERSION})")
    if doc.get("model_type", MODEL_TYPE) != MODEL_TYPE:
        raise ModelFormatError(f"Not a KDE-AsHMM model: {doc.get('model_type')!r}")
    try:
        c = doc["centers"]
        values = np.asarray(c["values"], dtype=float).reshape(int(c["n_rows"]), int(c["n_cols"]))
        centers = TimeSeries(values=values, feature_names=tuple(doc["feature_names"]))
        graph = ContextGraph.from_dict(doc["graph"])
        model = KdeAsHmmModel(
            n_states=int(doc["n_states"]), p_star=int(doc["p_star"]),
            pi=np.asarray(doc["pi"], dtype=float), a=np.asarray(doc["a"], dtype=float),
            graph=graph,
            weights=KernelWeights(rows=[[np.asarray(w, dtype=float) for w in row]
                                        for row in doc["weights"]]),
            h=np.asarray(doc["h"], dtype=float), omega=np.asarray(doc["omega"], dtype=float),
            centers=centers)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvariantError):
            raise
        raise ModelFormatError(f"Malformed model document: {e}")
    model.validate()
    return model


def save_model(model: KdeAsHmmModel, path: str, provenance: Optional[Dict[str, Any]] = None) -> str:
    """Write the model as a single self-describing JSON document."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model, provenance), f, indent=1)
        f.write("\n")
    logger.debug("Model saved to %s", path)
    return path


def load_model(path: str) -> KdeAsHmmModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})")
    return model_from_dict(doc)
