"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``[PASS]`` or ``[FAIL]`` line; the lines are also
collected into the ``acceptance criteria`` section of the pytest summary.
"""
import math
import time

import numpy as np
import pytest

from auxssm.auxk import GenSSMTarget, adapt_delta, gradient_error, init_state, kernel_step
from auxssm.fkpg import (
    PROPOSAL_MODES, BootstrapFK, aux_pgibbs_step, csmc_step, init_pg_state, multiplicative_noise, smc,
)
from auxssm.gauss import RngStream
from auxssm.lgssm import backward_sample, dense_oracle, kalman_filter, random_model, rts_smoother
from auxssm.pit import dnc_sample, extract_affine_law, prefix_sample, tree_shape
from auxssm.bench.models import ModelSpec, build_model, grid_smoother
from auxssm.bench.runner import RunConfig, prior_path, run

pytestmark = pytest.mark.slow


def chains(seed, n):
    return RngStream(seed).child("chain", np.arange(n))


def small_target(seed=31, T=4, dx=2):
    """Small LGSSM target with its exact smoothing marginals."""
    model, obs = random_model(np.random.default_rng(seed), T, dx, 1)
    fr = kalman_filter(model, obs)
    return model, fr, GenSSMTarget.from_lgssm(model, obs), rts_smoother(model, fr)


def moment_z(samples, mean, var):
    """z-scores of pooled first and second central moments, SE from per-chain averages.

    ``samples`` is ``(iterations, chains, ...)``; chains are independent.
    """
    C = samples.shape[1]
    m1 = samples.mean(0)
    m2 = ((samples - mean) ** 2).mean(0)
    z1 = (m1.mean(0) - mean) / (m1.std(0, ddof=1) / math.sqrt(C))
    z2 = (m2.mean(0) - var) / (m2.std(0, ddof=1) / math.sqrt(C))
    return z1, z2


def test_criterion_1_linear_time(record_acceptance):
    Ts = [2**k for k in range(7, 13)]
    times = []
    for T in Ts:
        built = build_model(ModelSpec("stochvol", T=T, d=2, seed=0))
        state = init_state(built.target, built.truth, 0.1)
        state = kernel_step(built.target, state, RngStream(0))
        reps = []
        for r in range(5):
            t0 = time.perf_counter()
            state = kernel_step(built.target, state, RngStream(1).child("rep", r))
            reps.append(time.perf_counter() - t0)
        times.append(float(np.median(reps)))
    slope = float(np.polyfit(np.log(Ts), np.log(times), 1)[0])
    ok = 0.8 <= slope <= 1.3
    record_acceptance("1", ok, f"log-time vs log-T slope {slope:.3f} (want [0.8, 1.3]); "
                               f"seconds per step {['%.3g' % t for t in times]}")
    assert ok


def test_criterion_2a_pathwise_equivalence(record_acceptance):
    worst = 0.0
    rng = np.random.default_rng(2)
    for i, T in enumerate((1, 17, 64, 200)):
        model, obs = random_model(rng, T, 2, 1, mask_prob=0.2)
        fr = kalman_filter(model, obs)
        streams = chains(20 + i, 250)  # 4 models x 250 = 1000 draws
        a = backward_sample(model, fr, streams)
        b = prefix_sample(model, fr, streams)
        worst = max(worst, float(np.abs(a - b).max()))
    ok = worst < 1e-8
    record_acceptance("2a", ok, f"max |sequential - prefix| over 1000 shared-stream draws = {worst:.2e} (tol 1e-8)")
    assert ok


def test_criterion_2b_law_equivalence(record_acceptance):
    rng = np.random.default_rng(3)
    worst = {"sequential": 0.0, "prefix": 0.0, "dnc": 0.0}
    for _ in range(100):
        T = int(rng.integers(1, 21))
        dx, dy = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        model, obs = random_model(rng, T, dx, dy, mask_prob=0.2)
        fr = kalman_filter(model, obs)
        dense = dense_oracle(model, obs)
        for name in worst:
            law = extract_affine_law(name, model, fr)
            err = max(np.abs(law.mean - dense.mean).max(), np.abs(law.cov - dense.cov).max())
            worst[name] = max(worst[name], float(err))
    ok = max(worst.values()) < 1e-8
    record_acceptance("2b", ok, "max law error vs dense oracle over 100 models: "
                      + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + " (tol 1e-8)")
    assert ok


def test_criterion_3_exact_case_acceptance(record_acceptance):
    model, obs = random_model(np.random.default_rng(4), 20, 2, 1, mask_prob=0.2)
    lin = GenSSMTarget.from_lgssm(model, obs)
    F, b, Q = model.F[0], model.b[0], model.Q[0]
    # case (b) with affine moment functions, homogeneous dynamics
    affine = GenSSMTarget(
        T=20, dx=2, m0=lin.m0, P0=lin.P0,
        mean_fn=lambda x, t: x @ F.T + b,
        jac_fn=lambda x, t: np.broadcast_to(F, x.shape + (2,)),
        cov_fn=lambda x, t: Q, obs=lin.obs,
    )
    worst, rates = 0.0, []
    for k, target in enumerate((lin, affine)):
        state = init_state(target, np.zeros((4, 21, 2)), 0.5)
        for it in range(1000):
            state = kernel_step(target, state, chains(30 + k, 4).child("iter", it))
            worst = max(worst, float(np.abs(state.log_alpha).max()))
        rates.append(float(state.acceptance_rate.min()))
    ok = worst < 1e-8 and min(rates) == 1.0
    record_acceptance("3", ok, f"max |log alpha| over 1000 steps = {worst:.2e} (tol 1e-8), "
                               f"min acceptance {min(rates):.3f}, linear and affine-moment dynamics")
    assert ok


def test_criterion_4_grid_oracle(record_acceptance):
    target = build_model(ModelSpec("grid-1d-test", T=10, seed=4)).target
    oracle = grid_smoother(target)["mean"]
    C, burn, n = 200, 200, 500  # 200 x 500 = 1e5 pooled iterations
    rng = chains(41, C)
    state = init_state(target, prior_path(target, rng.child("start"), (C,)), 0.5)
    for it in range(burn):
        state = adapt_delta(kernel_step(target, state, rng.child("iter", it)), 0.5)
    total = np.zeros((C, 11))
    for it in range(burn, burn + n):
        state = kernel_step(target, state, rng.child("iter", it))
        total += state.x[..., 0]
    means = total / n
    se = means.std(0, ddof=1) / math.sqrt(C)
    z = (means.mean(0) - oracle) / se
    ok = bool(np.all(np.abs(z) < 4))
    record_acceptance("4", ok, f"max |z| of marginal means vs grid oracle = {np.abs(z).max():.2f} "
                               f"over t=0..10 (tol 4), acceptance {state.acceptance_rate.mean():.2f}")
    assert ok


def test_criterion_5_particle_gibbs_invariance(record_acceptance):
    model, fr, target, sm = small_target()
    mean, var = sm.mean, np.diagonal(sm.cov, axis1=-2, axis2=-1)
    C, n = 1000, 100  # 1e5 pooled iterations per configuration
    x0 = backward_sample(model, fr, chains(50, C))
    worst, details = 0.0, []
    for mode in PROPOSAL_MODES:
        for N in (2, 8, 32):
            pg = init_pg_state(x0, 0.5)
            samples = np.empty((n, C) + x0.shape[1:])
            for it in range(n):
                pg = aux_pgibbs_step(target, pg, N, chains(51, C).child("iter", it), mode)
                samples[it] = pg.x
            z1, z2 = moment_z(samples, mean, var)
            w = float(max(np.abs(z1).max(), np.abs(z2).max()))
            worst = max(worst, w)
            details.append(f"{mode}/N={N}: {w:.2f}")
    ok = worst < 4
    record_acceptance("5", ok, f"max |z| of means and variances vs smoother = {worst:.2f} (tol 4); "
                      + "; ".join(details))
    assert ok


def test_criterion_6_pseudo_marginal(record_acceptance):
    model, fr, target, sm = small_target()
    mean, var = sm.mean, np.diagonal(sm.cov, axis1=-2, axis2=-1)
    fk = multiplicative_noise(BootstrapFK(target), (0.5, 1.5))
    C, n, N = 1000, 100, 8
    x = backward_sample(model, fr, chains(60, C))
    # given x, each noise value is drawn with probability proportional to itself
    e = np.where(chains(61, C).uniform_like((C, model.T + 1)) < 0.75, 1.5, 0.5)
    z = np.concatenate([x, e[..., None]], -1)
    samples = np.empty((n,) + x.shape)
    high = 0.0
    for it in range(n):
        z, _ = csmc_step(fk, z, N, chains(62, C).child("iter", it))
        samples[it] = z[..., :-1]
        high += np.mean(z[..., -1] == 1.5) / n
    z1, z2 = moment_z(samples, mean, var)
    worst = float(max(np.abs(z1).max(), np.abs(z2).max()))
    ok = worst < 4
    record_acceptance("6", ok, f"max |z| of means and variances vs smoother with noise (0.5, 1.5) = {worst:.2f} "
                               f"(tol 4); share of 1.5 in retained noise {high:.3f} (0.75 expected)")
    assert ok


def test_criterion_7_likelihood_unbiased(record_acceptance):
    model, obs = random_model(np.random.default_rng(7), 10, 2, 1)
    target = GenSSMTarget.from_lgssm(model, obs)
    log_z = float(kalman_filter(model, obs).log_marginal)
    ps = smc(BootstrapFK(target), 32, RngStream(70).child("run", np.arange(200)))
    ratio = np.exp(ps.log_likelihood - log_z)
    se = ratio.std(ddof=1) / math.sqrt(ratio.size)
    zval = (ratio.mean() - 1) / se
    ok = abs(zval) < 4
    record_acceptance("7", ok, f"mean likelihood / Kalman evidence = {ratio.mean():.4f} +- {se:.4f}, z {zval:.2f} "
                               f"(tol 4); mean log estimate {ps.log_likelihood.mean():.3f} vs {log_z:.3f}")
    assert ok


def test_criterion_8_parallel_determinism(record_acceptance):
    model, obs = random_model(np.random.default_rng(8), 300, 2, 1)
    fr = kalman_filter(model, obs)
    rng = chains(80, 4)
    identical = True
    for fn in (prefix_sample, dnc_sample):
        ref = fn(model, fr, rng, workers=1)
        for w in (2, 8):
            identical &= bool(np.array_equal(fn(model, fr, rng, workers=w), ref))
    depths_ok = True
    checked = []
    for T in (1, 2, 3, 7, 8, 100, 300, 1000):
        m, o = random_model(np.random.default_rng(T), T, 1, 1)
        stats = {}
        prefix_sample(m, kalman_filter(m, o), RngStream(0), stats=stats)
        want = math.ceil(math.log2(T)) if T > 1 else 0
        height = int(tree_shape(T).height[0])
        depths_ok &= stats["depth"] == want and height == want
        checked.append(f"T={T}:{stats['depth']}/{height}/{want}")
    ok = identical and depths_ok
    record_acceptance("8", ok, f"bit-identical across workers 1, 2, 8: {identical}; "
                               f"scan depth / tree height / ceil(log2 T): {' '.join(checked)}")
    assert ok


def test_criterion_9_cross_sampler_stochvol(record_acceptance, tmp_path):
    spec = ModelSpec("stochvol", T=200, d=3, seed=9)
    common = dict(model=spec, n_samples=500, n_chains=100, n_particles=16, seed=90)
    # particle Gibbs moves the path locally and needs the longer warm-up
    aux = run(RunConfig(sampler="aux-kalman-seq", burn_in=150, output_dir=str(tmp_path / "aux"), **common))
    pg = run(RunConfig(sampler="pgibbs-gradient", burn_in=350, output_dir=str(tmp_path / "pg"), **common))
    a, b = aux["pooled"], pg["pooled"]
    z = (np.array(a["mean"]) - b["mean"]) / np.hypot(a["se"], b["se"])
    ok = bool(np.all(np.abs(z) < 4))
    record_acceptance("9", ok, f"max |z| over {z.size} probes (5 times x 3 dims) = {np.abs(z).max():.2f} (tol 4); "
                               f"wall time {aux['wall_time']['total']:.0f}s + {pg['wall_time']['total']:.0f}s")
    assert ok


def test_criterion_10_gradients(record_acceptance):
    rng = np.random.default_rng(10)
    worst = {}
    for kind, d in (("stochvol", 3), ("diffusion-smoothing", 3), ("spatio-temporal", 9),
                    ("grid-1d-test", 1), ("lgssm-synthetic", 2)):
        built = build_model(ModelSpec(kind, T=10, d=d, seed=11))
        err = 0.0
        for _ in range(100):
            x = built.truth + 0.5 * rng.normal(size=built.truth.shape)
            err = max(err, gradient_error(built.target, x))
        worst[kind] = err
    ok = max(worst.values()) < 1e-5
    record_acceptance("10", ok, "max relative gradient error at 100 random points: "
                      + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-5)")
    assert ok
