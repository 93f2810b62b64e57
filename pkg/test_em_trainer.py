"""
Tests for EM training: initialisation, E-step statistics and closed-form M-steps.
"""

import itertools
import warnings

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from conftest import build_model, random_model
from em_trainer import (KernelPosterior, TrainConfig, e_step, em_fit, fit_bandwidth,
                        expected_complete_log_likelihood, init_model, init_omega_from_labels,
                        m_step, m_step_bandwidth, m_step_omega, m_step_transitions, m_step_weights,
                        solve_weight_system)
from errors import (BandwidthFloorWarning, InvariantError, RidgeFallbackWarning, StateStarvationError,
                    StateStarvationWarning)
from inference import Posteriors, viterbi
from kernel_math import silverman_bandwidth
from model_core import ContextGraph, TimeSeries
from synthetic_bench import state_recovery


def make_series(values, labels=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    return TimeSeries(values=values, feature_names=tuple(f"x{m}" for m in range(values.shape[1])),
                      state_labels=labels)


def single_pair_posterior(d, gamma=1.0):
    scatter = np.array([[[[d * d]]]])
    return KernelPosterior(gamma_sums=np.array([gamma]), omega_counts=np.array([[gamma]]),
                           scatter=scatter, p_star=0, last_index=1)


class TestInitModel:
    def test_two_states(self):
        series = make_series(np.random.default_rng(0).normal(size=(50, 2)))
        model = init_model(series, n_states=2, p_star=1, seed=3)
        np.testing.assert_allclose(model.a, [[0.9995, 0.0005], [0.0005, 0.9995]], atol=1e-15)
        np.testing.assert_allclose(model.pi, [0.5, 0.5])
        assert model.graph.is_naive()
        assert all(w.size == 0 for row in model.weights.rows for w in row)
        np.testing.assert_array_equal(model.h[0], model.h[1])
        assert model.h[0, 0] == pytest.approx(silverman_bandwidth(series.values[:, 0].std(ddof=1), 50))
        assert model.omega.shape == (2, 49)

    def test_single_state(self):
        model = init_model(make_series(np.arange(10.0)), n_states=1, p_star=0, seed=0)
        np.testing.assert_array_equal(model.pi, [1.0])
        np.testing.assert_array_equal(model.a, [[1.0]])

    @pytest.mark.parametrize("seed", [0, 1, 2, 2 ** 63])
    def test_omega_rows_are_normalised(self, seed):
        model = init_model(make_series(np.random.default_rng(1).normal(size=30)), 3, 1, seed)
        np.testing.assert_allclose(model.omega.sum(axis=1), 1.0, atol=1e-12)
        for row in model.omega:
            assert row.max() / row.min() <= 1.5 + 1e-12

    def test_seed_determines_omega(self):
        series = make_series(np.random.default_rng(2).normal(size=30))
        np.testing.assert_array_equal(init_model(series, 2, 1, 5).omega, init_model(series, 2, 1, 5).omega)
        assert not np.array_equal(init_model(series, 2, 1, 5).omega, init_model(series, 2, 1, 6).omega)

    def test_rejects_bad_arguments(self):
        series = make_series([0.0, 1.0, 2.0])
        with pytest.raises(InvariantError):
            init_model(series, n_states=0, p_star=0, seed=0)
        with pytest.raises(InvariantError):
            init_model(series, n_states=2, p_star=2, seed=0)


class TestLabelInitialisation:
    def test_all_instants_in_one_state(self):
        model = init_model(make_series(np.random.default_rng(3).normal(size=21)), 2, 1, 0)
        new = init_omega_from_labels(model, ["a"] * 21, {"a": 0})
        np.testing.assert_allclose(new.omega, 1.0 / 20, atol=1e-15)

    def test_half_the_instants(self):
        model = init_model(make_series(np.random.default_rng(4).normal(size=41)), 2, 1, 0)
        labels = ["a"] * 20 + ["b"] * 20
        new = init_omega_from_labels(model, labels, {"a": 0, "b": 1})
        assert new.omega[0, :20] == pytest.approx(np.full(20, 2.0 / 40), abs=1e-5)
        assert new.omega[0, 20:] == pytest.approx(np.zeros(20), abs=1e-5)
        np.testing.assert_allclose(new.omega.sum(axis=1), 1.0, atol=1e-12)

    def test_unmapped_label(self):
        model = init_model(make_series(np.arange(6.0)), 2, 0, 0)
        with pytest.raises(InvariantError, match="no state mapping"):
            init_omega_from_labels(model, ["a", "a", "a", "b", "b", "c"], {"a": 0, "b": 1})


class TestEStep:
    def test_psi_sums_to_gamma_and_skips_the_diagonal(self):
        rng = np.random.default_rng(5)
        model = random_model(rng, n_states=3, n_vars=2, n_rows=33, p_star=1)
        post, kpost = e_step(model, model.centers, block_size=7, keep_psi=True)
        np.testing.assert_allclose(kpost.psi.sum(axis=1), post.gamma, atol=1e-10)
        diagonal = kpost.psi[np.arange(32), np.arange(32), :]
        assert np.all(diagonal == 0.0)
        np.testing.assert_allclose(kpost.gamma_sums, post.gamma.sum(axis=0), atol=1e-12)

    def test_streamed_statistics_match_dense_psi(self):
        rng = np.random.default_rng(6)
        graph = ContextGraph(parents=[[[], [0]], [[1], []]], ar_order=[[1, 0], [0, 1]])
        centers = rng.normal(size=(40, 2))
        model = build_model(centers, n_states=2, p_star=1, graph=graph,
                            weights=[[[0.3], [-0.4]], [[0.2], [0.5]]],
                            h=np.full((2, 2), 0.8), omega=rng.dirichlet(np.ones(39), size=2))
        _, streamed = e_step(model, model.centers, block_size=6, threads=2, keep_psi=True)
        dense = KernelPosterior.from_dense(streamed.psi, model, model.centers)
        np.testing.assert_allclose(streamed.scatter, dense.scatter, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(streamed.omega_counts, dense.omega_counts, atol=1e-12)

    def test_single_other_center_takes_all_of_gamma(self):
        model = build_model([0.0, 1.0], n_states=2, a=np.array([[0.7, 0.3], [0.4, 0.6]]),
                            h=np.array([[1.0], [0.5]]))
        post, kpost = e_step(model, model.centers, keep_psi=True)
        np.testing.assert_allclose(kpost.psi[0, 1], post.gamma[0], atol=1e-14)
        np.testing.assert_allclose(kpost.psi[1, 0], post.gamma[1], atol=1e-14)

    def test_constant_series_spreads_gamma_evenly(self):
        model = build_model(np.full(6, 2.5), n_states=2)
        post, kpost = e_step(model, model.centers, keep_psi=True)
        for t in range(6):
            others = [l for l in range(6) if l != t]
            np.testing.assert_allclose(kpost.psi[t, others], np.tile(post.gamma[t] / 5, (5, 1)), atol=1e-14)

    def test_psi_matches_enumeration_of_paths_and_centers(self):
        rng = np.random.default_rng(7)
        model = random_model(rng, n_states=2, n_vars=1, n_rows=4)
        x = model.centers.values[:, 0]
        log_pi, log_a = np.log(model.pi), np.log(model.a)
        log_omega = np.log(model.omega)
        choices = [[l for l in range(4) if l != t] for t in range(4)]
        scores, keys = [], []
        for path in itertools.product(range(2), repeat=4):
            base = log_pi[path[0]] + sum(log_a[path[t], path[t + 1]] for t in range(3))
            for centers in itertools.product(*choices):
                s = base
                for t, (q, l) in enumerate(zip(path, centers)):
                    s += log_omega[q, l] + norm.logpdf(x[t], loc=x[l], scale=model.h[q, 0])
                scores.append(s)
                keys.append((path, centers))
        scores = np.array(scores)
        weights = np.exp(scores - logsumexp(scores))
        expected = np.zeros((4, 4, 2))
        for (path, centers), w in zip(keys, weights):
            for t in range(4):
                expected[t, centers[t], path[t]] += w

        post, kpost = e_step(model, model.centers, keep_psi=True)
        np.testing.assert_allclose(kpost.psi, expected, atol=1e-10)
        assert post.loglik == pytest.approx(logsumexp(scores), abs=1e-10)

    def test_naive_model_matches_a_direct_kde_hmm(self):
        rng = np.random.default_rng(8)
        series = make_series(np.concatenate([rng.normal(-2, 1, 25), rng.normal(2, 0.5, 25)]))
        model, _ = em_fit(series, TrainConfig(n_states=2, p_star=0, max_iter=3, seed=1))
        x = series.values[:, 0]
        b = np.zeros((50, 2))
        for t in range(50):
            for i in range(2):
                b[t, i] = sum(model.omega[i, l] * norm.pdf(x[t], x[l], model.h[i, 0])
                              for l in range(50) if l != t)
        alpha = model.pi * b[0]
        loglik = np.log(alpha.sum())
        alpha /= alpha.sum()
        for t in range(1, 50):
            alpha = (alpha @ model.a) * b[t]
            loglik += np.log(alpha.sum())
            alpha /= alpha.sum()
        assert e_step(model, series)[0].loglik == pytest.approx(loglik, abs=1e-8)


class TestMStep:
    def test_weights_recover_an_exact_linear_relation(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=60)
        series = make_series(np.column_stack([x0, -1.7 * x0 + 0.4]))
        graph = ContextGraph(parents=[[[], [0]]], ar_order=[[0, 0]])
        model = init_model(series, 1, 0, 0, graph)
        _, kpost = e_step(model, series)
        w = m_step_weights(kpost, graph, 0, 1)
        assert w == pytest.approx([-1.7], abs=1e-8)
        with pytest.warns(BandwidthFloorWarning):
            h = m_step_bandwidth(kpost, graph, np.array([-1.7]), 0, 1, floor=1e-3)
        assert h == 1e-3

    def test_weights_without_conditioning_vector_are_empty(self):
        kpost = single_pair_posterior(0.5)
        assert m_step_weights(kpost, ContextGraph.naive(1, 1), 0, 0).size == 0

    def test_well_conditioned_system_is_solved_exactly(self):
        w, ridge = solve_weight_system(np.array([[2.0, 0.0], [0.0, 4.0]]), np.array([2.0, 4.0]))
        assert not ridge
        np.testing.assert_allclose(w, [1.0, 1.0])

    def test_singular_system_falls_back_to_a_ridge(self):
        suu, sux = np.ones((2, 2)), np.array([1.0, 1.0])
        with pytest.warns(RidgeFallbackWarning):
            filters = list(warnings.filters)
            w, ridge = solve_weight_system(suu, sux)
            assert warnings.filters == filters
        assert ridge
        np.testing.assert_allclose(suu @ w, sux, atol=1e-6)

    def test_zero_system_gives_zero_weights(self):
        with pytest.warns(RidgeFallbackWarning, match="identically zero"):
            w, ridge = solve_weight_system(np.zeros((2, 2)), np.zeros(2))
        assert ridge
        np.testing.assert_array_equal(w, [0.0, 0.0])

    def test_silent_fits_report_flags_instead_of_warning(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _, ridge = solve_weight_system(np.ones((2, 2)), np.ones(2), warn=False)
            h, clamped = fit_bandwidth(single_pair_posterior(1e-6), ContextGraph.naive(1, 1), np.zeros(0),
                                       0, 0, floor=1e-3, warn=False)
        assert caught == []
        assert ridge and clamped
        assert h == 1e-3

    def test_bandwidth_of_a_single_pair(self):
        assert m_step_bandwidth(single_pair_posterior(-0.75), ContextGraph.naive(1, 1),
                                np.zeros(0), 0, 0, floor=1e-8) == pytest.approx(0.75)

    def test_bandwidth_of_a_starved_state(self):
        with pytest.raises(StateStarvationError, match="State 0"):
            m_step_bandwidth(single_pair_posterior(0.5, gamma=0.0), ContextGraph.naive(1, 1),
                             np.zeros(0), 0, 0, floor=1e-8)

    def test_omega_of_separable_psi(self):
        w = np.array([0.1, 0.2, 0.3, 0.4])
        kpost = KernelPosterior(gamma_sums=np.array([2.0]), omega_counts=(2.0 * w)[None, :],
                                scatter=np.zeros((1, 1, 1, 1)), p_star=0, last_index=3)
        row = m_step_omega(kpost, 0)
        np.testing.assert_allclose(row, w, atol=1e-11)
        assert row.sum() == pytest.approx(1.0, abs=1e-12)

    def test_omega_of_uniform_psi_is_nearly_uniform(self):
        model = build_model(np.full(8, 1.0))
        _, kpost = e_step(model, model.centers)
        np.testing.assert_allclose(m_step_omega(kpost, 0), 1.0 / 8, atol=1e-10)

    def test_transitions_follow_the_posteriors(self):
        gamma = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        zeta = np.array([[[0.0, 1.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]])
        pi, a = m_step_transitions(Posteriors(gamma=gamma, zeta=zeta, loglik=-1.0))
        np.testing.assert_array_equal(pi, [1.0, 0.0])
        assert a[0, 1] == 1.0
        np.testing.assert_allclose(a.sum(axis=1), 1.0)

    def test_starved_transition_row_is_reset(self):
        gamma = np.array([[1.0, 0.0], [1.0, 0.0]])
        zeta = np.array([[[1.0, 0.0], [0.0, 0.0]]])
        with pytest.warns(StateStarvationWarning):
            _, a = m_step_transitions(Posteriors(gamma=gamma, zeta=zeta, loglik=-1.0))
        np.testing.assert_array_equal(a[1], [0.5, 0.5])

    def test_starved_state_is_reset(self):
        rng = np.random.default_rng(10)
        model = random_model(rng, n_states=2, n_vars=1, n_rows=20)
        post, kpost = e_step(model, model.centers)
        kpost.gamma_sums[1] = 0.0
        with pytest.warns(StateStarvationWarning):
            new, exact = m_step(model, post, kpost)
        assert not exact
        np.testing.assert_allclose(new.omega[1], 1.0 / 20)
        assert new.h[1, 0] == pytest.approx(silverman_bandwidth(model.centers.values[:, 0].std(ddof=1), 20))


class TestStationarity:
    @pytest.fixture
    def fitted_step(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=45)
        x1 = np.sin(x0) + 0.3 * rng.normal(size=45)
        series = make_series(np.column_stack([x0, x1]))
        graph = ContextGraph(parents=[[[], [0]], [[], []]], ar_order=[[0, 1], [1, 0]])
        model = init_model(series, 2, 1, 4, graph)
        post, kpost = e_step(model, series, keep_psi=True)
        new, exact = m_step(model, post, kpost)
        assert exact
        return new, series, post, kpost.psi

    @staticmethod
    def q_value(model, series, post, psi):
        return expected_complete_log_likelihood(model, series, post, psi)

    def test_gradient_in_weights_vanishes(self, fitted_step):
        model, series, post, psi = fitted_step
        scale = max(1.0, abs(self.q_value(model, series, post, psi)))
        for i, m, k in [(0, 1, 0), (0, 1, 1), (1, 0, 0)]:
            eps = 1e-5
            plus, minus = model.copy(), model.copy()
            plus.weights.rows[i][m][k] += eps
            minus.weights.rows[i][m][k] -= eps
            grad = (self.q_value(plus, series, post, psi) - self.q_value(minus, series, post, psi)) / (2 * eps)
            assert abs(grad) <= 1e-6 * scale

    def test_gradient_in_bandwidths_vanishes(self, fitted_step):
        model, series, post, psi = fitted_step
        scale = max(1.0, abs(self.q_value(model, series, post, psi)))
        for i in range(2):
            for m in range(2):
                eps = 1e-6 * model.h[i, m]
                plus, minus = model.copy(), model.copy()
                plus.h[i, m] += eps
                minus.h[i, m] -= eps
                grad = (self.q_value(plus, series, post, psi) - self.q_value(minus, series, post, psi)) / (2 * eps)
                assert abs(grad) <= 1e-6 * scale

    def test_gradient_in_omega_vanishes_on_the_simplex(self, fitted_step):
        model, series, post, psi = fitted_step
        scale = max(1.0, abs(self.q_value(model, series, post, psi)))
        for i in range(2):
            top, second = np.argsort(model.omega[i])[::-1][:2]
            eps = 1e-6 * model.omega[i, second]
            plus, minus = model.copy(), model.copy()
            plus.omega[i, top] += eps
            plus.omega[i, second] -= eps
            minus.omega[i, top] -= eps
            minus.omega[i, second] += eps
            grad = (self.q_value(plus, series, post, psi) - self.q_value(minus, series, post, psi)) / (2 * eps)
            assert abs(grad) <= 1e-6 * scale

    def test_update_does_not_lower_q(self, fitted_step):
        model, series, post, psi = fitted_step
        best = self.q_value(model, series, post, psi)
        worse = model.copy()
        worse.h = worse.h * 1.05
        assert self.q_value(worse, series, post, psi) < best


class TestEmFit:
    def test_zero_iterations_returns_the_initial_model(self):
        series = make_series(np.random.default_rng(12).normal(size=(30, 2)))
        config = TrainConfig(n_states=2, p_star=1, max_iter=0, seed=9)
        model, report = em_fit(series, config)
        assert report.loglik_per_datum == []
        assert report.iterations == 0
        np.testing.assert_array_equal(model.omega, init_model(series, 2, 1, 9).omega)

    @pytest.mark.parametrize("max_iter", [1, 4])
    def test_trace_ends_at_the_returned_model_when_iterations_run_out(self, max_iter):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(50, 2))
        x[:, 1] += x[:, 0] ** 2
        series = make_series(x)
        config = TrainConfig(n_states=2, p_star=1, max_iter=max_iter, rel_tol=0.0, seed=3)
        model, report = em_fit(series, config)
        assert not report.converged
        assert report.iterations == len(report.loglik_per_datum) == max_iter + 1
        post, _ = e_step(model, series)
        assert report.loglik_per_datum[-1] == pytest.approx(post.loglik / (series.n_rows - 1), rel=1e-12)

    def test_single_state_iid_trace_is_non_decreasing(self):
        series = make_series(np.random.default_rng(13).normal(size=(80, 2)))
        _, report = em_fit(series, TrainConfig(n_states=1, p_star=0, max_iter=10, rel_tol=0.0))
        trace = report.loglik_per_datum
        assert len(trace) >= 2
        for previous, current in zip(trace, trace[1:]):
            assert current >= previous - 1e-8 * abs(previous)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_structured_models_are_monotone(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(60, 3))
        x[:, 1] += 0.8 * x[:, 0] ** 2
        series = make_series(x)
        graph = ContextGraph(parents=[[[], [0], []], [[], [], [1]]], ar_order=[[1, 0, 0], [0, 0, 1]])
        _, report = em_fit(series, TrainConfig(n_states=2, p_star=1, graph=graph, max_iter=15,
                                               rel_tol=0.0, seed=seed))
        trace = report.loglik_per_datum
        for previous, current in zip(trace, trace[1:]):
            assert current >= previous - 1e-8 * abs(previous)

    def test_recovers_well_separated_regimes(self):
        rng = np.random.default_rng(14)
        states = np.repeat([0, 1, 0, 1, 0, 1], 50)
        x = np.where(states == 0, rng.normal(-5.0, 1.0, 300), rng.normal(5.0, 1.0, 300))
        series = make_series(x)
        model, report = em_fit(series, TrainConfig(n_states=2, p_star=0, max_iter=50, seed=2))
        assert state_recovery(states, viterbi(model, series), 2) >= 0.9
        assert report.iterations >= 1

    def test_labels_seed_omega(self):
        rng = np.random.default_rng(15)
        labels = np.repeat(["low", "high"], 30)
        x = np.where(labels == "low", rng.normal(-3, 1, 60), rng.normal(3, 1, 60))
        series = make_series(x, labels=labels)
        config = TrainConfig(n_states=2, p_star=0, max_iter=0, label_mapping={"high": 0, "low": 1})
        model, _ = em_fit(series, config)
        assert model.omega[1, :30].sum() > 0.99
        assert model.omega[0, 30:].sum() > 0.99

    def test_report_round_trip_to_dict(self):
        series = make_series(np.random.default_rng(16).normal(size=20))
        _, report = em_fit(series, TrainConfig(n_states=1, p_star=0, max_iter=2))
        doc = report.to_dict()
        assert doc["iterations"] == report.iterations
        assert doc["round_starts"] == [0]
