"""
Shared fixtures: small hand-built models and synthetic specs.
"""

import numpy as np
import pytest

from model_core import ContextGraph, KdeAsHmmModel, KernelWeights, TimeSeries
from synthetic_bench import SyntheticSpec, VariableLaw


def build_model(centers, n_states=1, p_star=0, graph=None, weights=None, h=None, omega=None,
                pi=None, a=None):
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers.reshape(-1, 1)
    series = TimeSeries(values=centers, feature_names=tuple(f"x{m}" for m in range(centers.shape[1])))
    n_vars = series.n_vars
    n_centers = series.n_rows - p_star
    graph = graph or ContextGraph.naive(n_states, n_vars)
    if weights is None:
        weights = KernelWeights.zeros(graph)
    elif not isinstance(weights, KernelWeights):
        weights = KernelWeights(rows=[[np.asarray(w, dtype=float) for w in row] for row in weights])
    model = KdeAsHmmModel(
        n_states=n_states, p_star=p_star,
        pi=np.full(n_states, 1.0 / n_states) if pi is None else pi,
        a=np.full((n_states, n_states), 1.0 / n_states) if a is None else a,
        graph=graph, weights=weights,
        h=np.ones((n_states, n_vars)) if h is None else h,
        omega=np.full((n_states, n_centers), 1.0 / n_centers) if omega is None else omega,
        centers=series)
    model.validate()
    return model


@pytest.fixture
def model_factory():
    return build_model


def random_model(rng, n_states, n_vars, n_rows, p_star=0):
    centers = rng.normal(size=(n_rows, n_vars))
    omega = rng.dirichlet(np.ones(n_rows - p_star), size=n_states)
    a = rng.dirichlet(np.ones(n_states), size=n_states)
    pi = rng.dirichlet(np.ones(n_states))
    h = rng.uniform(0.4, 1.5, size=(n_states, n_vars))
    return build_model(centers, n_states=n_states, p_star=p_star, h=h, omega=omega, pi=pi, a=a)


def two_variable_spec(coupled_state=1, effect=1.5, sigma=0.3, n_states=2, noise_vars=0):
    """Specs where x1 depends on x0 squared in exactly one state."""
    names = ["x0", "x1"] + [f"n{k}" for k in range(noise_vars)]
    laws = []
    for i in range(n_states):
        row = [VariableLaw(sigma=1.0),
               VariableLaw(parents=[0], c=[effect], e=1.0, sigma=sigma) if i == coupled_state
               else VariableLaw(sigma=1.0 + 0.5 * i)]
        row += [VariableLaw(sigma=1.0) for _ in range(noise_vars)]
        laws.append(row)
    pattern = [(i % n_states, 50) for i in range(2 * n_states)]
    return SyntheticSpec(n_states=n_states, feature_names=names, laws=laws, state_pattern=pattern,
                         p_star=1, noise_vars=list(range(2, 2 + noise_vars)), burn_in=20, seed=0)


@pytest.fixture
def coupled_spec():
    return two_variable_spec()
