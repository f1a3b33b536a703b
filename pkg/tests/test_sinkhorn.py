import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowpool.measures import DiscreteMeasure, cost_matrix, uniform_measure
from flowpool.sinkhorn import (
    SinkhornError,
    SinkhornParams,
    coupling_from_potentials,
    dual_objective,
    sinkhorn_divergence,
    sinkhorn_solve,
)

from oracles import entropic_divergence, entropy, naive_sinkhorn, primal_value, sqdist, two_by_two_closed_form

TIGHT = SinkhornParams(epsilon=0.1, max_iters=5000, tol=1e-12)


def solve(a, b, C, eps, tol=1e-12):
    mu = DiscreteMeasure(np.zeros((len(a), 1)), np.asarray(a, float))
    nu = DiscreteMeasure(np.zeros((len(b), 1)), np.asarray(b, float))
    return sinkhorn_solve(mu, nu, np.asarray(C, float), SinkhornParams(eps, 5000, tol))


class TestParams:
    @pytest.mark.parametrize("kw", [dict(epsilon=0), dict(max_iters=0), dict(tol=0), dict(epsilon=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SinkhornParams(**kw)


class TestSolve:
    def test_singleton(self):
        sol = solve([1.0], [1.0], [[2.5]], 0.3)
        assert sol.converged
        np.testing.assert_allclose(coupling_from_potentials(sol, [[2.5]]), [[1.0]], atol=1e-12)
        assert sol.loss == pytest.approx(2.5, abs=1e-12)

    @pytest.mark.parametrize("eps", [0.05, 1.0, 7.0])
    def test_constant_cost(self, eps):
        a = np.array([0.2, 0.3, 0.5])
        b = np.array([0.6, 0.4])
        C = np.full((3, 2), 1.7)
        sol = solve(a, b, C, eps)
        P = coupling_from_potentials(sol, C)
        np.testing.assert_allclose(P, np.outer(a, b), atol=1e-8)
        assert sol.loss == pytest.approx(1.7 - eps * entropy(np.outer(a, b)), abs=1e-9)

    @pytest.mark.parametrize("eps", [0.1, 0.02, 1.0])
    def test_two_by_two_against_closed_form(self, eps):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        sol = solve([0.5, 0.5], [0.5, 0.5], C, eps)
        P_ref = two_by_two_closed_form(eps)
        np.testing.assert_allclose(coupling_from_potentials(sol, C), P_ref, atol=1e-6)
        assert sol.loss == pytest.approx(primal_value(P_ref, C, eps), abs=1e-9)

    def test_matches_naive_scaling(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n, m = rng.integers(1, 8, size=2)
            X, Y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
            a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
            eps = float(rng.uniform(0.2, 3))
            C = sqdist(X, Y)
            sol = sinkhorn_solve(DiscreteMeasure(X, a), DiscreteMeasure(Y, b), C, SinkhornParams(eps, 5000, 1e-13))
            P_ref = naive_sinkhorn(a, b, C, eps)
            np.testing.assert_allclose(coupling_from_potentials(sol, C), P_ref, atol=1e-8)
            assert sol.loss == pytest.approx(primal_value(P_ref, C, eps), abs=1e-8)

    def test_loss_is_dual_objective(self):
        rng = np.random.default_rng(4)
        X, Y = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
        mu, nu = uniform_measure(X), uniform_measure(Y)
        C = cost_matrix(X, Y)
        sol = sinkhorn_solve(mu, nu, C, SinkhornParams(0.5))
        assert sol.loss == dual_objective(sol.f, sol.g, mu.weights, nu.weights, C, 0.5)

    def test_zero_weight_rejected(self):
        mu = DiscreteMeasure(np.zeros((2, 1)), np.array([1.0, 0.0]))
        with pytest.raises(ValueError, match="positive"):
            sinkhorn_solve(mu, mu, np.zeros((2, 2)))

    def test_shape_mismatch(self):
        mu = uniform_measure(np.zeros((2, 1)))
        with pytest.raises(ValueError, match="shape"):
            sinkhorn_solve(mu, mu, np.zeros((3, 2)))

    def test_nonconvergence_is_reported(self):
        rng = np.random.default_rng(5)
        X, Y = rng.normal(size=(20, 2)), rng.normal(size=(30, 2))
        params = SinkhornParams(0.01, max_iters=1, tol=1e-14, newton_after=None, anneal=False)
        sol = sinkhorn_solve(uniform_measure(X), uniform_measure(Y), cost_matrix(X, Y), params)
        assert not sol.converged
        assert sol.marginal_error > 1e-14
        with pytest.raises(SinkhornError, match="non-converged"):
            coupling_from_potentials(sol, cost_matrix(X, Y))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.005, 10))
    def test_marginal_feasibility(self, seed, eps):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(1, 25, size=2)
        X, Y = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        C = cost_matrix(X, Y)
        sol = sinkhorn_solve(uniform_measure(X), uniform_measure(Y), C, SinkhornParams(eps, 2000, 1e-7))
        assert sol.converged
        P = coupling_from_potentials(sol, C)
        assert np.abs(P.sum(1) - 1 / n).max() <= 1e-7
        assert np.abs(P.sum(0) - 1 / m).max() <= 1e-7
        assert np.all(np.isfinite(sol.f)) and np.all(np.isfinite(sol.g))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.01, 5), st.booleans())
    def test_dual_monotone_across_sweeps(self, seed, eps, self_problem):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(1, 20, size=2)
        X, Y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        if self_problem:
            Y = X
        trace = []
        sinkhorn_solve(uniform_measure(X), uniform_measure(Y), cost_matrix(X, Y),
                       SinkhornParams(eps, 2000, 1e-10), trace=trace)
        assert np.all(np.diff(trace) >= -1e-12)


class TestDivergence:
    def test_identical_is_zero(self):
        X = np.random.default_rng(0).normal(size=(6, 2))
        mu = uniform_measure(X)
        assert sinkhorn_divergence(mu, mu, params=SinkhornParams(0.1)).value == 0.0

    def test_singletons(self):
        x, y = np.array([[0.5, -1.0]]), np.array([[2.0, 1.0]])
        div = sinkhorn_divergence(uniform_measure(x), uniform_measure(y), params=SinkhornParams(0.7))
        assert div.value == pytest.approx(((x - y) ** 2).sum(), abs=1e-12)

    def test_value_is_combination(self):
        rng = np.random.default_rng(1)
        div = sinkhorn_divergence(uniform_measure(rng.normal(size=(4, 2))), uniform_measure(rng.normal(size=(3, 2))))
        assert div.value == div.xy.loss - 0.5 * div.xx.loss - 0.5 * div.yy.loss

    def test_random_clouds_against_oracle(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        div = sinkhorn_divergence(uniform_measure(X), uniform_measure(Y), params=SinkhornParams(0.5, 5000, 1e-13))
        assert div.value >= 0
        assert div.value == pytest.approx(entropic_divergence(X, Y, 0.5), abs=1e-6)

    def test_reuses_target_self_problem(self):
        rng = np.random.default_rng(3)
        mu, nu = uniform_measure(rng.normal(size=(4, 2))), uniform_measure(rng.normal(size=(6, 2)))
        first = sinkhorn_divergence(mu, nu)
        again = sinkhorn_divergence(mu, nu, init=first, yy=first.yy)
        assert again.yy is first.yy
        assert again.value == pytest.approx(first.value, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.05, 5))
    def test_symmetric_in_arguments(self, seed, eps):
        rng = np.random.default_rng(seed)
        mu = uniform_measure(rng.normal(size=(int(rng.integers(1, 10)), 2)))
        nu = uniform_measure(rng.normal(size=(int(rng.integers(1, 10)), 2)))
        p = SinkhornParams(eps, 5000, 1e-12)
        assert sinkhorn_divergence(mu, nu, params=p).value == pytest.approx(
            sinkhorn_divergence(nu, mu, params=p).value, abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.001, 10))
    def test_debiasing(self, seed, eps):
        rng = np.random.default_rng(seed)
        nu = uniform_measure(rng.normal(size=(int(rng.integers(1, 30)), 3)))
        assert abs(sinkhorn_divergence(nu, nu, params=SinkhornParams(eps)).value) < 1e-12
