from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from ssqlasso import em
from ssqlasso.ald import check_loss, mixture_constants
from ssqlasso.em import (Dataset, EStepExpectations, NumericalError, SsqlassoConfig,
                         SsqlassoState, destandardize, e_step, initialize, log_joint_posterior,
                         log_posterior, m_step, soft_threshold, spike_slab_posterior, standardize)

from conftest import random_dataset, small_problem
from oracles import bql_em


def fresh(st, **kw):
    """Copy of a state with fields replaced and the residual cache dropped."""
    return replace(st, resid=None, **kw)




class TestDataset:
    def test_from_arrays_adds_intercept(self):
        d = Dataset.from_arrays([1.0, 2.0, 3.0], np.eye(3), np.arange(3.0)[:, None])
        assert d.n == 3 and d.p == 3 and d.q == 1
        assert_array_equal(d.Z[:, 0], 1.0)

    def test_rejections(self):
        X = np.ones((3, 2))
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0], X[:1])
        with pytest.raises(ValueError):
            Dataset([1.0, 2.0, 3.0], np.full((3, 1), 2.0), X)
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0, np.nan, 3.0], X)
        with pytest.raises(ValueError):
            Dataset.from_arrays([1.0, 2.0, 3.0], np.ones((2, 2)))

    def test_immutable(self, tiny):
        with pytest.raises(ValueError):
            tiny.X[0, 0] = 1.0

    def test_standardize_roundtrip(self, tiny):
        work, center, scale = standardize(tiny)
        assert_allclose(work.X.mean(0), 0.0, atol=1e-12)
        assert_allclose(work.X.std(0), 1.0, rtol=1e-12)
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(1), rng.standard_normal(tiny.p)
        a2, b2 = destandardize(a, b, center, scale)
        assert_allclose(tiny.Z @ a2 + tiny.X @ b2, work.Z @ a + work.X @ b, rtol=1e-12)

    def test_constant_column_rejected(self):
        X = np.column_stack([np.arange(5.0), np.ones(5)])
        d = Dataset.from_arrays(np.arange(5.0), X)
        with pytest.raises(ValueError, match="constant"):
            em.fit(d, SsqlassoConfig())


class TestConfig:
    def test_defaults(self):
        c = SsqlassoConfig()
        assert (c.v_k, c.a, c.b, c.delta, c.max_iter) == (1e3, 1.0, 1.0, 1e-4, 500)

    @pytest.mark.parametrize("s0,s1", [(1.0, 1.0), (2.0, 1.0), (0.0, 1.0), (-1.0, 1.0)])
    def test_scale_order(self, s0, s1):
        with pytest.raises(ValueError):
            SsqlassoConfig(s0=s0, s1=s1)

    def test_equal_scales_in_test_mode(self):
        assert SsqlassoConfig(s0=0.5, s1=0.5, allow_equal_scales=True).s0 == 0.5

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            SsqlassoConfig(tau=1.0)


class TestInitialize:
    def test_median_intercept(self):
        d = Dataset.from_arrays([1.0, 2.0, 3.0, 4.0, 5.0], np.random.default_rng(0).standard_normal((5, 3)))
        st = initialize(d, SsqlassoConfig())
        assert st.alpha[0] == 3.0
        assert_array_equal(st.beta, np.zeros(3))
        assert (st.sigma, st.theta) == (1.0, 0.5)
        assert st.q_value == log_posterior(d, SsqlassoConfig(), fresh(st))

    def test_quantile_intercept(self, tiny):
        st = initialize(tiny, SsqlassoConfig(tau=0.3))
        assert st.alpha[0] == np.quantile(tiny.y, 0.3)


class TestEStep:
    def test_gig_weights_against_direct_formula(self, tiny):
        cfg = SsqlassoConfig(tau=0.3, s0=0.1, s1=1.0)
        rng = np.random.default_rng(1)
        st = SsqlassoState(np.array([0.2]), rng.normal(0, 0.3, tiny.p), 0.7, 0.3)
        ex = e_step(tiny, cfg, st)
        r = tiny.y - tiny.Z @ st.alpha - tiny.X @ st.beta
        tt = 0.3 * 0.7
        w1sq = r ** 2 / (2 / tt * 0.7)
        w2sq = 2 / 0.7 + ((1 - 0.6) / tt) ** 2 / (2 / tt * 0.7)
        assert_allclose(ex.v_inv, np.sqrt(w2sq / w1sq), rtol=1e-12)
        assert_allclose(ex.v, np.sqrt(w1sq / w2sq) + 1 / w2sq, rtol=1e-12)

    def test_eta_example(self, tiny):
        eta, s_inv = spike_slab_posterior(np.zeros(3), 0.5, 0.1, 1.0)
        assert_allclose(eta, 0.25 / 2.75, rtol=1e-14)
        assert_allclose(s_inv, (1 - eta) / 0.1 + eta / 1.0, rtol=1e-14)

    def test_eta_matches_density_ratio(self):
        beta = np.array([-0.3, 0.0, 0.05, 1.2])
        theta, s0, s1 = 0.2, 0.05, 2.0
        slab = theta * stats.laplace.pdf(beta, scale=s1)
        spike = (1 - theta) * stats.laplace.pdf(beta, scale=s0)
        eta, _ = spike_slab_posterior(beta, theta, s0, s1)
        assert_allclose(eta, slab / (slab + spike), rtol=1e-12)

    def test_no_underflow(self):
        eta, s_inv = spike_slab_posterior(np.array([50.0, -80.0]), 0.01, 1e-3, 1.0)
        assert_array_equal(eta, 1.0)
        assert_allclose(s_inv, 1.0)

    def test_equal_scales_gives_theta(self):
        eta, _ = spike_slab_posterior(np.linspace(-2, 2, 9), 0.37, 0.4, 0.4)
        assert_allclose(eta, 0.37, rtol=1e-14)

    def test_endpoints(self):
        _, s_inv = spike_slab_posterior(np.zeros(2), 0.0, 0.1, 1.0)
        assert_allclose(s_inv, 10.0)
        _, s_inv = spike_slab_posterior(np.zeros(2), 1.0, 0.1, 1.0)
        assert_allclose(s_inv, 1.0)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.floats(0.01, 0.99),
           st.floats(1e-3, 0.5), st.floats(0.6, 5.0))
    def test_monotone_and_bounded(self, beta, theta, s0, s1):
        beta = np.array(beta)
        eta, s_inv = spike_slab_posterior(beta, theta, s0, s1)
        order = np.argsort(np.abs(beta), kind="stable")
        assert np.all(np.diff(eta[order]) >= -1e-15)
        assert np.all(np.diff(s_inv[order]) <= 1e-12)
        assert np.all((s_inv >= 1 / s1 - 1e-12) & (s_inv <= 1 / s0 + 1e-9))


def _q_state(data, cfg, seed=0):
    rng = np.random.default_rng(seed)
    beta = np.where(rng.random(data.p) < 0.4, rng.normal(0, 0.5, data.p), 0.0)
    return SsqlassoState(np.array([0.3] + [0.1] * data.q), beta, 0.6, 0.3)


class TestMStep:
    def test_soft_threshold_examples(self):
        assert soft_threshold(3.0, 1.0) / 2.0 == 1.0
        assert soft_threshold(0.5, 1.0) == 0.0
        assert soft_threshold(-0.5, 1.0) == 0.0
        assert soft_threshold(-3.0, 1.0) == -2.0

    def test_theta_is_mean_eta(self, tiny):
        cfg = SsqlassoConfig(tau=0.4, s0=0.05, s1=1.0)
        st = _q_state(tiny, cfg)
        ex = e_step(tiny, cfg, st)
        ex = EStepExpectations(ex.v_inv, ex.v, np.full(tiny.p, 0.5), ex.s_inv)
        assert m_step(tiny, cfg, st, ex).theta == 0.5

    @pytest.mark.parametrize("tau", [0.3, 0.5, 0.8])
    def test_sigma_is_stationary(self, tau):
        data = small_problem(2, n=60, p=15, tau=tau, q=2)[0]
        cfg = SsqlassoConfig(tau=tau, s0=0.05, s1=1.0, a=2.0, b=0.5)
        st = _q_state(data, cfg)
        ex = e_step(data, cfg, st)
        s_new = em.update_sigma(data, cfg, st, ex)
        h = 1e-6 * s_new
        q = lambda s: log_joint_posterior(data, cfg, fresh(st, sigma=s), ex)
        assert abs((q(s_new + h) - q(s_new - h)) / (2 * h)) < 1e-6 * data.n
        assert q(s_new) > q(s_new * 1.01) and q(s_new) > q(s_new * 0.99)

    def test_coordinates_are_stationary(self):
        data = small_problem(3, n=60, p=15, tau=0.3, q=2)[0]
        cfg = SsqlassoConfig(tau=0.3, s0=0.05, s1=1.0)
        st = _q_state(data, cfg)
        ex = e_step(data, cfg, st)
        st = fresh(st, sigma=em.update_sigma(data, cfg, st, ex))
        h = 1e-6
        for l in range(data.q + 1):
            a = st.alpha.copy()
            a[l] = em.update_alpha(data, cfg, st, ex, l)
            st = fresh(st, alpha=a)

            def q(v):
                a2 = st.alpha.copy()
                a2[l] = v
                return log_joint_posterior(data, cfg, fresh(st, alpha=a2), ex)
            assert abs((q(a[l] + h) - q(a[l] - h)) / (2 * h)) < 1e-6
        for m in range(data.p):
            b = st.beta.copy()
            b[m] = em.update_beta(data, cfg, st, ex, m)
            st = fresh(st, beta=b)

            def q(v):
                b2 = st.beta.copy()
                b2[m] = v
                return log_joint_posterior(data, cfg, fresh(st, beta=b2), ex)
            if b[m] != 0.0:
                assert abs((q(b[m] + h) - q(b[m] - h)) / (2 * h)) < 1e-6
            else:  # subgradient: no direction improves
                assert q(h) <= q(0.0) + 1e-12 and q(-h) <= q(0.0) + 1e-12

    def test_compiled_sweep_matches_coordinate_updates(self):
        data = small_problem(4, n=50, p=10, tau=0.7, q=1)[0]
        cfg = SsqlassoConfig(tau=0.7, s0=0.05, s1=1.0)
        st = _q_state(data, cfg)
        ex = e_step(data, cfg, st)
        new = m_step(data, cfg, st, ex)
        ref = fresh(st, sigma=em.update_sigma(data, cfg, st, ex))
        for l in range(data.q + 1):
            a = ref.alpha.copy()
            a[l] = em.update_alpha(data, cfg, ref, ex, l)
            ref = fresh(ref, alpha=a)
        for m in range(data.p):
            b = ref.beta.copy()
            b[m] = em.update_beta(data, cfg, ref, ex, m)
            ref = fresh(ref, beta=b)
        assert_allclose(new.alpha, ref.alpha, rtol=1e-10, atol=1e-12)
        assert_allclose(new.beta, ref.beta, rtol=1e-10, atol=1e-12)
        assert new.sigma == ref.sigma


class TestObjectives:
    def test_log_posterior_differences_match_scipy(self):
        data = small_problem(5, n=30, p=8, tau=0.3, q=1)[0]
        cfg = SsqlassoConfig(tau=0.3, s0=0.05, s1=1.5, a=2.0, b=0.7, v_k=10.0)

        def oracle(st):
            mu = data.Z @ st.alpha + data.X @ st.beta
            # ALD density written independently as tau(1-tau)/sigma exp(-rho((y-mu)/sigma))
            u = (data.y - mu) / st.sigma
            lik = np.sum(np.log(0.21 / st.sigma) - u * (0.3 - (u < 0)))
            ig = stats.invgamma.logpdf(st.sigma, cfg.a, scale=cfg.b)
            norm = stats.norm.logpdf(st.alpha, scale=np.sqrt(cfg.v_k)).sum()
            mix = np.log((1 - st.theta) * stats.laplace.pdf(st.beta, scale=cfg.s0)
                         + st.theta * stats.laplace.pdf(st.beta, scale=cfg.s1)).sum()
            return lik + ig + norm + mix

        s1 = SsqlassoState(np.array([0.1, 0.2]), np.linspace(-0.5, 0.5, 8), 0.8, 0.3)
        s2 = SsqlassoState(np.array([-0.2, 0.4]), np.r_[np.zeros(5), 0.3, -0.1, 0.9], 1.3, 0.6)
        assert_allclose(log_posterior(data, cfg, s1) - log_posterior(data, cfg, s2),
                        oracle(s1) - oracle(s2), rtol=1e-10)

    def test_q_penalty_is_linear_in_abs_beta(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((20, 4))
        X[:, 2] = 0.0  # beta_2 leaves the likelihood untouched
        data = Dataset.from_arrays(rng.standard_normal(20), X)
        cfg = SsqlassoConfig(standardize=False)
        st = SsqlassoState(np.zeros(1), np.array([0.1, 0.0, 0.2, -0.3]), 1.0, 0.4)
        ex = e_step(data, cfg, st)
        b = st.beta.copy()
        b[2] = -0.7
        diff = log_joint_posterior(data, cfg, fresh(st, beta=b), ex) - log_joint_posterior(data, cfg, st, ex)
        assert_allclose(diff, -ex.s_inv[2] * (0.7 - 0.2), rtol=1e-12)

    def test_q_diverges_as_theta_vanishes(self, tiny):
        cfg = SsqlassoConfig()
        st = _q_state(tiny, cfg)
        ex = e_step(tiny, cfg, st)
        assert log_joint_posterior(tiny, cfg, fresh(st, theta=0.0), ex) == -np.inf
        vals = [log_joint_posterior(tiny, cfg, fresh(st, theta=t), ex) for t in (1e-2, 1e-4, 1e-8)]
        assert vals[0] > vals[1] > vals[2]


class TestFit:
    def test_ascent_on_random_problems(self):
        rng = np.random.default_rng(123)
        for k in range(25):
            data = random_dataset(rng, 50, 20, q=int(rng.integers(0, 3)))
            s1 = float(rng.uniform(0.5, 3.0))
            cfg = SsqlassoConfig(tau=float(rng.uniform(0.1, 0.9)), s0=float(s1 * rng.uniform(0.01, 0.9)),
                                 s1=s1)
            f = em.fit(data, cfg)
            assert np.all(np.diff(f.q_trace) >= -1e-8), k

    def test_compiled_matches_reference_loop(self):
        for seed in range(6):
            data = small_problem(seed, n=80, p=60, k=5, family="t2", tau=0.3)[0]
            cfg = SsqlassoConfig(tau=0.3, s0=0.02, s1=1.0)
            fast = em.fit(data, cfg)
            slow = em.fit(data, cfg, callback=lambda st, ex: None)
            assert fast.iterations == slow.iterations
            assert_allclose(fast.q_trace, slow.q_trace, rtol=1e-10, atol=1e-9)
            assert_allclose(fast.beta, slow.beta, rtol=1e-8, atol=1e-10)
            assert fast.sigma == pytest.approx(slow.sigma, rel=1e-10)

    def test_callback_sees_every_iteration(self, tiny):
        seen = []
        f = em.fit(tiny, SsqlassoConfig(s0=0.1), callback=lambda st, ex: seen.append(st.q_value))
        assert_allclose(seen, f.q_trace[1:])
        assert f.iterations == len(seen)

    def test_reduction_to_bayesian_quantile_lasso(self):
        # Near interpolation the weights 1/|r_i| amplify rounding differences
        # exponentially, so both sides use a residual floor of 1e-2 of sd(y).
        for seed in range(5):
            data = small_problem(seed, n=40, p=10, tau=0.4)[0]
            work = standardize(data)[0]
            s = 0.3
            cfg = SsqlassoConfig(tau=0.4, s0=s, s1=s, allow_equal_scales=True, standardize=False,
                                 max_iter=50, delta=1e-300, residual_floor=1e-2)
            ref = bql_em(work, 0.4, s, 0.5, 50, floor=1e-2)
            got = [initialize(work, cfg)]
            em.fit(work, cfg, callback=lambda st, ex: got.append(st))
            assert len(got) == len(ref)
            for g, (a, b, sig) in zip(got, ref):
                assert_allclose(g.alpha, a, rtol=1e-10, atol=1e-10)
                assert_allclose(g.beta, b, rtol=1e-10, atol=1e-10)
                assert_allclose(g.sigma, sig, rtol=1e-10)

    def test_equal_scales_eta_is_theta(self, tiny):
        cfg = SsqlassoConfig(s0=0.4, s1=0.4, allow_equal_scales=True)
        f = em.fit(tiny, cfg)
        assert_allclose(f.eta, f.theta, rtol=1e-12)

    @pytest.mark.parametrize("tau", [0.3, 0.5, 0.7])
    def test_intercept_recovers_quantile(self, tau):
        rng = np.random.default_rng(int(tau * 10))
        from ssqlasso.ald import AldParams, sample_ald
        y = sample_ald(1000, AldParams(1.0, 1.0, tau), rng)
        X = 1e-6 * rng.standard_normal((1000, 1))
        f = em.fit(Dataset.from_arrays(y, X), SsqlassoConfig(tau=tau, s0=1e-6, s1=1e-5))
        assert f.beta[0] == 0.0
        assert abs(f.alpha[0] - np.quantile(y, tau)) < 1e-2
        r = y - f.predict(np.ones((1000, 1)), X)
        assert abs(np.mean(r < 0) - tau) < 0.01

    def test_reflection_at_median(self):
        data = small_problem(7, n=50, p=20, k=3)[0]
        neg = Dataset(-data.y, data.Z, data.X)
        cfg = SsqlassoConfig(s0=0.05, s1=1.0)
        f, g = em.fit(data, cfg), em.fit(neg, cfg)
        assert_allclose(g.beta, -f.beta, atol=1e-10)
        assert_allclose(g.alpha, -f.alpha, atol=1e-10)
        assert g.iterations == f.iterations

    def test_exact_sparsity(self):
        data = small_problem(8, n=60, p=40, k=4)[0]
        f = em.fit(data, SsqlassoConfig(s0=0.02, s1=1.0))
        nz = f.beta[f.beta != 0]
        assert np.all(np.abs(nz) > np.finfo(float).tiny)
        assert_array_equal(f.selected, np.flatnonzero(f.beta))

    def test_nonconvergence_is_reported(self, tiny):
        f = em.fit(tiny, SsqlassoConfig(max_iter=1, delta=1e-300))
        assert not f.converged and f.iterations == 1

    def test_warm_start_state(self, tiny):
        cfg = SsqlassoConfig(s0=0.05)
        f = em.fit(tiny, cfg)
        g = em.fit(tiny, cfg, init=f.state)
        assert g.iterations <= 2
        assert_allclose(g.beta, f.beta, atol=1e-6)

    def test_deterministic(self, tiny):
        cfg = SsqlassoConfig(tau=0.3, s0=0.05)
        assert_array_equal(em.fit(tiny, cfg).beta, em.fit(tiny, cfg).beta)

    def test_no_standardize_on_prestandardized_data(self, tiny):
        work = standardize(tiny)[0]
        cfg = SsqlassoConfig(s0=0.05)
        a = em.fit(work, cfg)
        b = em.fit(work, replace(cfg, standardize=False))
        assert_allclose(a.beta, b.beta, atol=1e-8)


class TestPredict:
    def test_constant(self, tiny):
        f = em.fit(tiny, SsqlassoConfig())
        f = replace(f, beta=np.zeros(tiny.p), alpha=np.array([2.5]))
        assert_allclose(f.predict(tiny.Z, tiny.X), 2.5)

    def test_dot_product(self, tiny):
        f = replace(em.fit(tiny, SsqlassoConfig()), alpha=np.array([1.0]),
                    beta=np.arange(tiny.p, dtype=float))
        x = np.ones((1, tiny.p))
        assert_allclose(f.predict(np.ones((1, 1)), x), 1.0 + np.arange(tiny.p).sum())

    def test_dimension_mismatch(self, tiny):
        f = em.fit(tiny, SsqlassoConfig())
        with pytest.raises(ValueError):
            f.predict(tiny.Z, tiny.X[:, :-1])


def test_numerical_error_is_runtime_error():
    assert issubclass(NumericalError, RuntimeError)
