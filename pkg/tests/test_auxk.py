import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from auxssm import auxk
from auxssm.auxk import (
    GenSSMTarget, LinearObs, adapt_delta, build_aux_lgssm, gradient_error, init_state, kernel_step,
    sample_aux_obs,
)
from auxssm.gauss import FactorizationError, RngStream, isotropic_logpdf
from auxssm.lgssm import (
    backward_sample, kalman_filter, obs_logpdf, path_logpdf, prior_logpdf, random_model, rts_smoother,
)
from auxssm.bench.models import ModelSpec, build_model


def lgssm_target(seed=0, T=8, dx=2, dy=1):
    model, obs = random_model(np.random.default_rng(seed), T, dx, dy)
    return model, obs, GenSSMTarget.from_lgssm(model, obs)


def gaussian_log_g_target(model, obs):
    """Same posterior as ``from_lgssm`` but with the observations given as a generic potential."""
    Rinv = np.linalg.inv(model.R)

    def log_g(x, t):
        r = obs[t] - np.einsum("...ij,...j->...i", model.H[t], x) - model.c[t]
        return -0.5 * np.einsum("...i,...ij,...j->...", r, Rinv[t], r)

    def grad_log_g(x, t):
        r = obs[t] - np.einsum("...ij,...j->...i", model.H[t], x) - model.c[t]
        return np.einsum("...ji,...jk,...k->...i", model.H[t], Rinv[t], r)

    return GenSSMTarget(T=model.T, dx=model.dx, m0=model.m0, P0=model.P0, F=model.F, b=model.b, Q=model.Q,
                        log_g=log_g, grad_log_g=grad_log_g)


def potential_free_target(T=5, d=2):
    return GenSSMTarget(T=T, dx=d, m0=np.zeros(d), P0=np.eye(d), F=0.7 * np.eye(d), Q=0.5 * np.eye(d))


def quartic_target(T=6):
    def log_g(x, t):
        return -(x[..., 0] - 0.5) ** 4

    def grad_log_g(x, t):
        return -4 * (x - 0.5) ** 3

    return GenSSMTarget(T=T, dx=1, m0=np.zeros(1), P0=np.eye(1), F=0.8 * np.eye(1), Q=0.5 * np.eye(1),
                        log_g=log_g, grad_log_g=grad_log_g)


def stochvol(T=50, d=2, seed=1):
    return build_model(ModelSpec("stochvol", T=T, d=d, seed=seed))


class TestTarget:
    def test_requires_dynamics(self):
        with pytest.raises(ValueError):
            GenSSMTarget(T=2, dx=1, m0=np.zeros(1), P0=np.eye(1))

    def test_log_g_needs_gradient(self):
        with pytest.raises(ValueError):
            GenSSMTarget(T=2, dx=1, m0=np.zeros(1), P0=np.eye(1), F=np.eye(1), Q=np.eye(1),
                         log_g=lambda x, t: x[..., 0])

    def test_log_gamma_matches_dense_density(self):
        model, obs, target = lgssm_target(3, T=4, dx=2, dy=2)
        x = np.random.default_rng(0).normal(size=(5, 2))
        ref = prior_logpdf(model, x) + obs_logpdf(model, obs, x)
        assert abs(float(target.log_gamma(x)) - float(ref)) < 1e-10

    def test_generic_and_linear_potentials_agree(self):
        model, obs, target = lgssm_target(4, T=5, dx=2, dy=2)
        generic = gaussian_log_g_target(model, obs)
        x = np.random.default_rng(1).normal(size=(3, 6, 2))
        diff = target.log_gamma(x) - generic.log_gamma(x)
        # differ only by the Gaussian normalising constants
        assert np.ptp(diff) < 1e-10

    @pytest.mark.parametrize("kind,d", [("stochvol", 3), ("diffusion-smoothing", 3),
                                        ("spatio-temporal", 4), ("grid-1d-test", 1)])
    def test_gradients_match_finite_differences(self, kind, d):
        built = build_model(ModelSpec(kind, T=8, d=d, seed=2))
        assert gradient_error(built.target, built.truth) < 1e-5

    def test_gradient_error_detects_wrong_gradient(self):
        t = quartic_target()
        bad = GenSSMTarget(T=t.T, dx=1, m0=t.m0, P0=t.P0, F=t.F, Q=t.Q, log_g=t.log_g,
                           grad_log_g=lambda x, tt: 2 * t.grad_log_g(x, tt))
        x = np.random.default_rng(0).normal(size=(t.T + 1, 1))
        assert gradient_error(bad, x) > 1e-2


class TestSampleAuxObs:
    def test_vanishing_noise(self):
        x = np.random.default_rng(0).normal(size=(4, 2))
        state = init_state(potential_free_target(3), x, 1e-30)
        u = sample_aux_obs(state, RngStream(1))
        assert np.max(np.abs(u - x)) < 1e-14

    def test_mean_and_spread(self):
        n, delta = 100_000, 0.8
        x = np.array([[0.3], [-1.0]])
        target = potential_free_target(1, 1)
        state = init_state(target, np.broadcast_to(x, (n, 2, 1)), delta)
        u = sample_aux_obs(state, RngStream(2).child("chain", np.arange(n)))
        sd = math.sqrt(delta / 2)
        z = (u.mean(0) - x) / (sd / math.sqrt(n))
        assert np.all(np.abs(z) < 4)
        assert np.allclose(u.std(0), sd, rtol=0.02)

    def test_deterministic(self):
        x = np.zeros((3, 2))
        state = init_state(potential_free_target(2), x, 0.5)
        a = sample_aux_obs(state, RngStream(7))
        b = sample_aux_obs(state, RngStream(7))
        c = sample_aux_obs(state, RngStream(8))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestBuildAuxLGSSM:
    def test_no_potentials_gives_u(self):
        target = potential_free_target(4)
        rng = np.random.default_rng(0)
        x, u = rng.normal(size=(2, 5, 2))
        model, z = build_aux_lgssm(target, x, u, 0.3)
        np.testing.assert_array_equal(z, u)
        np.testing.assert_allclose(model.R, 0.15 * np.broadcast_to(np.eye(2), (5, 2, 2)))
        np.testing.assert_array_equal(model.H, np.broadcast_to(np.eye(2), (5, 2, 2)))

    def test_scalar_shift(self):
        target = GenSSMTarget(T=0, dx=1, m0=np.zeros(1), P0=np.eye(1), F=np.eye(1), Q=np.eye(1),
                              log_g=lambda x, t: x[..., 0], grad_log_g=lambda x, t: np.ones_like(x))
        _, z = build_aux_lgssm(target, np.array([[0.4]]), np.array([[1.5]]), 2.0)
        assert z[0, 0] == pytest.approx(2.5)

    def test_zeroth_order_ignores_gradient(self):
        target = quartic_target(3)
        rng = np.random.default_rng(1)
        x, u = rng.normal(size=(2, 4, 1))
        _, z = build_aux_lgssm(target, x, u, 0.5, first_order=False)
        np.testing.assert_array_equal(z, u)

    @pytest.mark.parametrize("m0,P0,y,R,u,delta", [(0.0, 1.0, 1.0, 0.5, -0.3, 0.4), (2.0, 3.0, -1.0, 2.0, 0.7, 5.0)])
    def test_scalar_conjugate_oracle(self, m0, P0, y, R, u, delta):
        obs = LinearObs(y=[[y]], H=[[[1.0]]], c=[[0.0]], R=[[[R]]])
        target = GenSSMTarget(T=0, dx=1, m0=[m0], P0=[[P0]], F=np.eye(1), Q=np.eye(1), obs=obs)
        model, z = build_aux_lgssm(target, np.array([[0.1]]), np.array([[u]]), delta)
        fr = kalman_filter(model, z)
        prec = 1 / P0 + 1 / R + 2 / delta
        mean = (m0 / P0 + y / R + 2 * u / delta) / prec
        assert fr.filt.mean[0, 0] == pytest.approx(mean, abs=1e-12)
        assert fr.filt.cov[0, 0, 0] == pytest.approx(1 / prec, abs=1e-12)

    def test_moment_dynamics_linearized_at_x(self):
        built = build_model(ModelSpec("diffusion-smoothing", T=6, d=3, seed=0))
        target = built.target
        x = built.truth
        u = x + 0.1
        model, _ = build_aux_lgssm(target, x, u, 0.2)
        tt = np.arange(1, 7)
        np.testing.assert_allclose(model.F, target.transition_jac(x[:-1], tt))
        np.testing.assert_allclose(model.b + np.einsum("tij,tj->ti", model.F, x[:-1]),
                                   target.transition_mean(x[:-1], tt), atol=1e-12)

    def test_batched_delta(self):
        target = potential_free_target(3)
        x = np.zeros((4, 4, 2))
        model, z = build_aux_lgssm(target, x, x, np.array([0.1, 0.2, 0.3, 0.4]))
        np.testing.assert_allclose(model.R[:, 0, 0, 0], [0.05, 0.1, 0.15, 0.2])


class TestKernelStep:
    @pytest.mark.parametrize("backend", ["sequential", "prefix", "dnc"])
    def test_exact_case_acceptance(self, backend):
        _, _, target = lgssm_target(5, T=12, dx=2, dy=1)
        x0 = np.random.default_rng(0).normal(size=(8, 13, 2))
        state = init_state(target, x0, 0.5)
        for it in range(30):
            state = kernel_step(target, state, RngStream(1).child("iter", it), backend=backend)
            assert np.max(np.abs(state.log_alpha)) < 1e-8
        assert np.all(state.acceptance_rate == 1)

    def test_potential_free_acceptance(self):
        target = potential_free_target(6)
        state = init_state(target, np.ones((4, 7, 2)), 1.3)
        for it in range(20):
            state = kernel_step(target, state, RngStream(2).child("iter", it))
            assert np.max(np.abs(state.log_alpha)) < 1e-8

    def test_affine_moment_functions_are_exact(self):
        model, obs, lin = lgssm_target(6, T=6, dx=2, dy=2)
        F, b, Q = lin.F[0], lin.b[0], lin.Q[0]
        target = GenSSMTarget(
            T=lin.T, dx=2, m0=lin.m0, P0=lin.P0,
            mean_fn=lambda x, t: x @ F.T + b,
            jac_fn=lambda x, t: np.broadcast_to(F, x.shape + (2,)),
            cov_fn=lambda x, t: Q, obs=lin.obs,
        )
        # homogeneous copy of the first transition
        state = init_state(target, np.zeros((3, 7, 2)), 0.7)
        for it in range(15):
            state = kernel_step(target, state, RngStream(3).child("iter", it))
            assert np.max(np.abs(state.log_alpha)) < 1e-8

    def test_backend_equivalence(self):
        target = stochvol(T=30, d=2).target
        x0 = np.zeros((6, 31, 2))
        a = init_state(target, x0, 0.3)
        b = init_state(target, x0, 0.3)
        for it in range(25):
            rng = RngStream(4).child("chain", np.arange(6)).child("iter", it)
            a = kernel_step(target, a, rng, backend="sequential")
            b = kernel_step(target, b, rng, backend="prefix")
            np.testing.assert_array_equal(a.accepted, b.accepted)
            assert np.max(np.abs(a.x - b.x)) < 1e-8
        assert 0 < a.n_accept.sum() < 6 * 25

    def test_log_alpha_matches_reconstruction_and_antisymmetry(self):
        target = stochvol(T=10, d=2).target
        rng0 = np.random.default_rng(5)
        x = rng0.normal(size=(11, 2))
        state = init_state(target, x, 0.4)
        rng = RngStream(9)
        new = kernel_step(target, state, rng)
        u = sample_aux_obs(state, rng.child("aux"))
        x_prop = rng0.normal(size=(11, 2)) if not new.accepted else new.x

        def log_alpha(a, b):
            ma, za = build_aux_lgssm(target, a, u, 0.4)
            mb, zb = build_aux_lgssm(target, b, u, 0.4)
            fwd = (target.log_gamma(a) + isotropic_logpdf(u, a, 0.2).sum()
                   + path_logpdf(ma, za, b, kalman_filter(ma, za)))
            rev = (target.log_gamma(b) + isotropic_logpdf(u, b, 0.2).sum()
                   + path_logpdf(mb, zb, a, kalman_filter(mb, zb)))
            return float(rev - fwd)

        if new.accepted:
            assert log_alpha(x, x_prop) == pytest.approx(float(new.log_alpha), abs=1e-8)
        for _ in range(5):
            y = rng0.normal(size=(11, 2))
            assert abs(log_alpha(x, y) + log_alpha(y, x)) < 1e-8

    def test_invariance_from_exact_posterior(self):
        model, obs = random_model(np.random.default_rng(11), 3, 1, 1)
        target = gaussian_log_g_target(model, obs)
        sm = rts_smoother(model, kalman_filter(model, obs))
        n = 10_000
        # exact joint posterior draws
        x = backward_sample(model, kalman_filter(model, obs), RngStream(12).child("chain", np.arange(n)))
        state = init_state(target, x, 0.5)
        for it in range(10):
            state = kernel_step(target, state, RngStream(13).child("chain", np.arange(n)).child("iter", it))
        assert 0.05 < state.acceptance_rate.mean() < 1.0
        xs = state.x[..., 0]
        m, v = sm.mean[:, 0], sm.cov[:, 0, 0]
        z_mean = (xs.mean(0) - m) / np.sqrt(v / n)
        c = xs - m
        z_var = (np.mean(c**2, 0) - v) / (np.std(c**2, 0) / math.sqrt(n))
        assert np.all(np.abs(z_mean) < 4), z_mean
        assert np.all(np.abs(z_var) < 4), z_var

    def test_nonfinite_proposal_rejected(self):
        def log_g(x, t):
            return np.where(x[..., 0] > 0.0, -np.inf, 0.0)

        def grad_log_g(x, t):
            return np.zeros_like(x)

        target = GenSSMTarget(T=3, dx=1, m0=np.zeros(1), P0=np.eye(1), F=np.eye(1), Q=np.eye(1),
                              log_g=log_g, grad_log_g=grad_log_g)
        state = init_state(target, -np.ones((50, 4, 1)), 1.0)
        for it in range(5):
            state = kernel_step(target, state, RngStream(3).child("chain", np.arange(50)).child("iter", it))
            assert np.all(state.x <= 0)
            assert np.all(np.isfinite(state.log_gamma))
        assert state.n_nonfinite.sum() > 0

    def test_factorization_failure_rejects(self, monkeypatch):
        target = potential_free_target(3)
        state = init_state(target, np.ones((2, 4, 2)), 0.5)

        def broken(*args, **kwargs):
            raise FactorizationError("forced")

        monkeypatch.setattr(auxk, "kalman_filter", broken)
        new = kernel_step(target, state, RngStream(0))
        np.testing.assert_array_equal(new.x, state.x)
        assert new.n_failed == 1
        assert not new.accepted.any()


class TestAdaptDelta:
    @given(st.floats(0.05, 0.95), st.integers(1, 500))
    def test_fixed_point(self, rate, n):
        state = init_state(potential_free_target(1), np.zeros((1, 2, 2)), 0.7)
        state = replace(state, iteration=n)
        out = adapt_delta(state, rate, indicator=np.array([rate]))
        assert out.delta[0] == pytest.approx(0.7, rel=1e-14)

    def test_always_accept_increases(self):
        target = potential_free_target(4)
        state = init_state(target, np.zeros((4, 5, 2)), 0.1)
        deltas = [0.1]
        for it in range(20):
            state = kernel_step(target, state, RngStream(1).child("iter", it))
            state = adapt_delta(state, 0.5)
            deltas.append(float(state.delta[0]))
        assert np.all(np.diff(deltas) > 0)

    def test_stochvol_acceptance_near_target(self):
        built = stochvol(T=50, d=2, seed=3)
        target = built.target
        C, burn, n = 16, 400, 300
        chains = RngStream(5).child("chain", np.arange(C))
        state = init_state(target, np.broadcast_to(built.truth, (C,) + built.truth.shape), 0.1)
        for it in range(burn):
            state = adapt_delta(kernel_step(target, state, chains.child("iter", it)), 0.5)
        frozen = state.delta.copy()
        acc = 0
        for it in range(burn, burn + n):
            state = kernel_step(target, state, chains.child("iter", it))
            acc += state.accepted.sum()
        np.testing.assert_array_equal(state.delta, frozen)
        assert abs(acc / (C * n) - 0.5) < 0.1
