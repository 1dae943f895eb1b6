import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsr.cvae import DiagGaussian
from latentsr.errors import AllRestartsFailed, DegenerateError
from latentsr.expr import exp, log, placeholder, var
from latentsr.optim import (
    CmaConfig,
    bfgs_fit_constants,
    bfgs_minimize,
    cma_init,
    cma_maximize,
    cma_sample,
    cma_update,
    fitness,
    r2,
    rank_candidates,
    recombination_weights,
    top_k_indices,
)

c = placeholder()
x0, x1 = var(0), var(1)


def unit_prior(d):
    return DiagGaussian(np.zeros(d), np.ones(d))


def sphere(target):
    return lambda z: -float(np.sum((z - target) ** 2))


class TestMetrics:
    def test_r2_cases(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2(y, y) == 1.0
        assert r2(y, np.full(3, y.mean())) == 0.0
        assert r2(y, np.array([1.0, 2.0, 4.0])) == pytest.approx(0.5)

    def test_r2_constant_target(self):
        assert r2([2.0, 2.0], [2.0, 2.0]) == 1.0
        assert r2([2.0, 2.0], [2.0, 2.1]) == -math.inf

    def test_r2_length_checks(self):
        with pytest.raises(ValueError):
            r2([1.0], [1.0])
        with pytest.raises(ValueError):
            r2([1.0, 2.0], [1.0, 2.0, 3.0])

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20), st.integers(0, 1000))
    def test_r2_permutation_invariant_and_bounded(self, ys, seed):
        y = np.array(ys)
        if np.ptp(y) == 0:
            return
        rng = np.random.default_rng(seed)
        yhat = y + rng.normal(size=y.size)
        perm = rng.permutation(y.size)
        assert r2(y, yhat) == pytest.approx(r2(y[perm], yhat[perm]), rel=1e-9, abs=1e-12)
        assert r2(y, yhat) <= 1.0

    def test_fitness(self):
        assert fitness(0.9, 10, 0.01) == pytest.approx(0.8)
        assert fitness(0.7, 12, 0.0) == 0.7
        assert fitness(0.9, 3, 0.1) > fitness(0.9, 4, 0.1)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=10), st.floats(-5, 5), st.floats(0, 0.1))
    def test_argmax_shift_invariant(self, scores, shift, omega):
        cx = list(range(1, len(scores) + 1))
        a = [fitness(s, k, omega) for s, k in zip(scores, cx)]
        b = [fitness(s + shift, k, omega) for s, k in zip(scores, cx)]
        # compare ordering up to float rounding of near-ties
        ia, ib = int(np.argmax(a)), int(np.argmax(b))
        assert a[ia] - a[ib] <= 1e-9


class TestCmaInit:
    def test_variance_scaling(self):
        prior = DiagGaussian(np.array([1.0, 2.0]), np.array([0.5, 2.0]))
        s = cma_init(prior, CmaConfig(t=1.0, k=2))
        np.testing.assert_array_equal(s.var, prior.var)
        s = cma_init(prior, CmaConfig(t=1.5, k=2))
        np.testing.assert_allclose(s.var, 2.25 * prior.var)
        np.testing.assert_array_equal(s.mean, prior.mean)

    def test_active_set(self):
        prior = DiagGaussian(np.zeros(4), np.array([3.0, 1.0, 5.0, 2.0]))
        assert cma_init(prior, CmaConfig(k=2)).active.tolist() == [0, 2]
        assert cma_init(prior, CmaConfig(k=4)).active.tolist() == [0, 1, 2, 3]

    def test_tie_break(self):
        assert top_k_indices(np.array([1.0, 2.0, 2.0, 2.0]), 2).tolist() == [1, 2]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            cma_init(unit_prior(3), CmaConfig(k=4))

    def test_bad_parents(self):
        with pytest.raises(ValueError):
            CmaConfig(s=4, p=5)


class TestCmaSample:
    def test_inactive_frozen(self):
        prior = DiagGaussian(np.arange(6.0), np.array([1, 9, 1, 9, 1, 9.0]))
        state = cma_init(prior, CmaConfig(k=3))
        z = cma_sample(state, 100, np.random.default_rng(0))
        np.testing.assert_array_equal(z[:, [0, 2, 4]], np.tile(prior.mean[[0, 2, 4]], (100, 1)))
        assert (z[:, [1, 3, 5]] != prior.mean[[1, 3, 5]]).all()

    def test_variance(self):
        prior = DiagGaussian(np.zeros(3), np.array([0.5, 1.0, 4.0]))
        state = cma_init(prior, CmaConfig(k=3, t=1.0))
        z = cma_sample(state, 100_000, np.random.default_rng(1))
        np.testing.assert_allclose(z.var(axis=0), prior.var, rtol=0.05)


class TestCmaUpdate:
    def test_weights(self):
        w = recombination_weights(4)
        assert w.sum() == pytest.approx(1.0)
        assert (np.diff(w) < 0).all()
        raw = np.log(4.5) - np.log([1, 2, 3, 4])
        np.testing.assert_allclose(w, raw / raw.sum())

    def test_identical_parents(self):
        d = 4
        cfg = CmaConfig(s=6, p=3, k=d, t=1.0)
        state = cma_init(DiagGaussian(np.ones(d), np.full(d, 2.0)), cfg)
        ranked = [(state.mean.copy(), 1.0)] * 6
        new = cma_update(state, ranked, cfg)
        np.testing.assert_array_equal(new.mean, state.mean)
        np.testing.assert_allclose(new.var, (1 - 2.0 / (d + 6)) * state.var)
        assert new.generation == 1

    def test_all_invalid(self):
        cfg = CmaConfig(s=4, k=2)
        state = cma_init(unit_prior(2), cfg)
        with pytest.raises(DegenerateError):
            cma_update(state, [(np.zeros(2), -math.inf)] * 4, cfg)

    def test_inactive_variance_untouched(self):
        cfg = CmaConfig(s=8, p=4, k=2)
        state = cma_init(DiagGaussian(np.zeros(4), np.array([4.0, 1.0, 3.0, 0.5])), cfg)
        rng = np.random.default_rng(0)
        zs = cma_sample(state, 8, rng)
        new = cma_update(state, [(z, -i) for i, z in enumerate(zs)], cfg)
        np.testing.assert_array_equal(new.var[[1, 3]], state.var[[1, 3]])
        np.testing.assert_array_equal(new.mean[[1, 3]], state.mean[[1, 3]])

    def test_variance_floor(self):
        cfg = CmaConfig(s=4, p=2, k=2, t=1.0)
        state = cma_init(DiagGaussian(np.zeros(2), np.full(2, 1e-13)), cfg)
        for _ in range(5):
            state = cma_update(state, [(state.mean.copy(), 0.0)] * 4, cfg)
        assert (state.var >= 1e-12).all()

    def test_rank_ties(self):
        assert rank_candidates(None, [1.0, 2.0, 2.0, 2.0], [5, 4, 3, 3]) == [2, 3, 1, 0]

    def test_best_so_far_monotone(self):
        d = 8
        cfg = CmaConfig(s=10, p=5, k=d, t=1.0, seed=3)
        _, hist = cma_maximize(sphere(np.full(d, 0.7)), cma_init(unit_prior(d), cfg), cfg, 50)
        assert all(b >= a for a, b in zip(hist, hist[1:]))

    def test_sphere_convergence(self):
        d = 64
        cfg = CmaConfig(s=32, p=16, k=d, t=1.0, seed=1)
        target = np.random.default_rng(99).normal(size=d)
        _, hist = cma_maximize(sphere(target), cma_init(unit_prior(d), cfg), cfg, 400)
        assert hist[-1] > -1e-6

    def test_matches_reference_sep_cma(self):
        cma = pytest.importorskip("cma")
        d = 16
        for seed in range(2):
            target = np.random.default_rng(500 + seed).normal(size=d)
            f = sphere(target)
            es = cma.CMAEvolutionStrategy(
                np.zeros(d), 1.0,
                {"CMA_diagonal": True, "popsize": 16, "CMA_mu": 8, "seed": seed + 1, "verbose": -9,
                 "tolfun": 0, "tolx": 0, "tolfunhist": 0, "maxiter": 3000},
            )
            ref = 0
            while not es.stop():
                xs = es.ask()
                es.tell(xs, [-f(np.asarray(x)) for x in xs])
                ref += 1
                if es.result.fbest < 1e-6:
                    break
            cfg = CmaConfig(s=16, p=8, k=d, t=1.0, seed=seed)
            _, hist = cma_maximize(f, cma_init(unit_prior(d), cfg), cfg, 3000)
            ours = next(i + 1 for i, v in enumerate(hist) if v > -1e-6)
            assert ref / 2 <= ours <= 2 * ref


class TestBfgs:
    def test_linear_constants(self):
        X = np.linspace(-2, 2, 40)[:, None]
        fit = bfgs_fit_constants(c * x0 + c, X, 2 * X[:, 0] + 3)
        np.testing.assert_allclose(fit.constants, [2.0, 3.0], atol=1e-6)
        assert fit.mse < 1e-12

    def test_no_placeholders(self):
        X = np.linspace(1, 2, 10)[:, None]
        e = x0 * x0
        fit = bfgs_fit_constants(e, X, X[:, 0])
        assert fit.expr == e
        assert fit.mse == pytest.approx(np.mean((X[:, 0] ** 2 - X[:, 0]) ** 2))

    def test_quadratic_iterations(self):
        A = np.array([[3.0, 0.5], [0.5, 1.0]])
        b = np.array([1.0, -2.0])
        res = bfgs_minimize(lambda x: float(0.5 * x @ A @ x - b @ x), np.ones(2))
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-6)
        assert res.iterations <= 20

    @pytest.mark.parametrize("seed", range(5))
    def test_random_five_constant_quadratic(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, (60, 2))
        coef = rng.normal(size=5)
        e = c * x0 + c * x1 + c * x0 * x0 + c * x1 * x0 + c
        y = coef[0] * X[:, 0] + coef[1] * X[:, 1] + coef[2] * X[:, 0] ** 2 + coef[3] * X[:, 1] * X[:, 0] + coef[4]
        fit = bfgs_fit_constants(e, X, y, rng=rng)
        assert fit.mse < 1e-10

    def test_nonlinear_constants(self):
        X = np.linspace(-1, 1, 30)[:, None]
        fit = bfgs_fit_constants(exp(c * x0) * c, X, 0.5 * np.exp(1.3 * X[:, 0]))
        np.testing.assert_allclose(sorted(fit.constants), [0.5, 1.3], atol=1e-6)

    def test_all_restarts_fail(self):
        X = np.linspace(-1, 1, 10)[:, None]
        with pytest.raises(AllRestartsFailed):
            bfgs_fit_constants(log(c * x0), X, X[:, 0])

    def test_extra_start_used_first(self):
        X = np.linspace(0.5, 2, 20)[:, None]
        fit = bfgs_fit_constants(c * x0, X, 4 * X[:, 0], extra_starts=[[4.0]])
        assert fit.restarts_used == 1
