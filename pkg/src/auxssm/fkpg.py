"""Feynman-Kac models, SMC, conditional SMC and auxiliary particle Gibbs.

Particle arrays have shape ``(..., N, d)`` where ``...`` indexes independent
chains. Resampling is multinomial; conditional SMC keeps the reference
path in slot 0 and selects its output by backward sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .auxk import GenSSMTarget
from .gauss import RngStream, cholesky, isotropic_logpdf, mvn_logpdf, psd_solve, stream_normals
from .lgssm import Trajectory, _mT, _mv


class DegenerateWeightsError(RuntimeError):
    def __init__(self, t: int):
        super().__init__(f"all particle weights are zero at time step {t}")
        self.t = t


class FeynmanKacModel:
    """Proposal kernels ``M_t`` and log-potentials ``log G_t``, ``t = 0..T``.

    ``x_prev`` is ``None`` at ``t = 0``. Methods are vectorised over the
    leading axes of their arguments; ``shape`` in :meth:`sample` is the
    full output shape ``(..., N, d)``.
    """

    T: int
    dx: int
    dynamics_gaussian: bool = False

    def sample(self, t: int, x_prev: Optional[np.ndarray], rng: RngStream, shape: tuple) -> np.ndarray:
        raise NotImplementedError

    def logpdf(self, t: int, x_prev: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_potential(self, t: int, x_prev: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _gauss_draw(mean: np.ndarray, cov: np.ndarray, rng: RngStream, shape: tuple) -> np.ndarray:
    xi = rng.normal_like(shape)
    return mean + _mv(cholesky(cov), xi)


class BootstrapFK(FeynmanKacModel):
    """Propose from the target dynamics, weight by the target potentials."""

    dynamics_gaussian = True

    def __init__(self, target: GenSSMTarget):
        self.target = target
        self.T, self.dx = target.T, target.dx

    def _moments(self, t, x_prev):
        if t == 0:
            return self.target.m0, self.target.P0
        return self.target.transition_mean(x_prev, t), self.target.transition_cov(x_prev, t)

    def sample(self, t, x_prev, rng, shape):
        mean, cov = self._moments(t, x_prev)
        return _gauss_draw(mean, cov, rng, shape)

    def logpdf(self, t, x_prev, x):
        mean, cov = self._moments(t, x_prev)
        return mvn_logpdf(x, mean, cov)

    def log_potential(self, t, x_prev, x):
        return self.target.log_potential(x, t)


PROPOSAL_MODES = ("prior", "gradient", "fully-adapted")


class AuxiliaryFK(FeynmanKacModel):
    """FK model whose path measure is ``pi(x | u)`` for auxiliary observations ``u``.

    Every mode divides its proposal density out of the potential, so all
    modes share the same path measure. ``u`` has shape ``(..., T + 1, d)``
    and ``delta`` the chain batch shape.
    """

    dynamics_gaussian = True

    def __init__(self, target: GenSSMTarget, u: np.ndarray, delta, mode: str = "prior", grad_at: str = "u"):
        if mode not in PROPOSAL_MODES:
            raise ValueError(f"unknown proposal mode {mode!r}")
        if grad_at not in ("u", "predicted"):
            raise ValueError("grad_at must be 'u' or 'predicted'")
        self.target = target
        self.T, self.dx = target.T, target.dx
        self.mode = mode
        self.grad_at = grad_at
        self.u = np.asarray(u, float)
        batch = self.u.shape[:-2]
        self.half = 0.5 * np.broadcast_to(np.asarray(delta, float), batch)
        self._grad_u = target.grad_log_potential(self.u, np.arange(self.T + 1))

    # u_t and delta/2 shaped to broadcast against particles (..., N, d)
    def _u(self, t):
        return self.u[..., t, :][..., None, :]

    def _half(self):
        return self.half[..., None]

    def _dyn(self, t, x_prev):
        tg = self.target
        if t == 0:
            return tg.m0, tg.P0
        return tg.transition_mean(x_prev, t), tg.transition_cov(x_prev, t)

    def _pseudo_obs(self, t, x_prev):
        if self.grad_at == "predicted" and t > 0:
            a, _ = self._dyn(t, x_prev)
            g = self.target.grad_log_potential(a, t)
        else:
            g = self._grad_u[..., t, :][..., None, :]
        return self._u(t) + self._half()[..., None] * g

    def proposal(self, t, x_prev):
        """Mean and covariance of ``M_t`` given ``x_prev``."""
        d = self.dx
        if self.mode == "prior":
            return self._dyn(t, x_prev)
        z = self._pseudo_obs(t, x_prev)
        half = self._half()[..., None, None]
        if self.mode == "gradient":
            return z, half * np.eye(d)
        a, Q = self._dyn(t, x_prev)
        S = Q + half * np.eye(d)
        K = _mT(psd_solve(S, Q))  # Q (Q + delta/2 I)^{-1}
        mean = a + _mv(K, z - a)
        cov = Q - K @ Q
        return mean, cov

    def sample(self, t, x_prev, rng, shape):
        mean, cov = self.proposal(t, x_prev)
        return _gauss_draw(mean, cov, rng, shape)

    def logpdf(self, t, x_prev, x):
        if self.mode == "gradient":
            return isotropic_logpdf(x, self._pseudo_obs(t, x_prev), self._half())
        mean, cov = self.proposal(t, x_prev)
        return mvn_logpdf(x, mean, cov)

    def log_integrand(self, t, x_prev, x):
        a, Q = self._dyn(t, x_prev)
        return (mvn_logpdf(x, a, Q) + self.target.log_potential(x, t)
                + isotropic_logpdf(x, self._u(t), self._half()))

    def log_potential(self, t, x_prev, x):
        if self.mode == "prior":
            return self.target.log_potential(x, t) + isotropic_logpdf(x, self._u(t), self._half())
        return self.log_integrand(t, x_prev, x) - self.logpdf(t, x_prev, x)


def adapted_proposal(target: GenSSMTarget, u_t: np.ndarray, x_prev, delta, mode: str, t: int = 1):
    """Proposal of the auxiliary FK model at step ``t`` as ``(sampler, logpdf)``.

    ``sampler(rng, shape)`` draws particles; ``logpdf(x)`` evaluates ``M_t``.
    """
    u_t = np.asarray(u_t, float)
    u = np.zeros(u_t.shape[:-1] + (target.T + 1, target.dx))
    u[..., t, :] = u_t
    fk = AuxiliaryFK(target, u, delta, mode)

    def sampler(rng, shape):
        return fk.sample(t, x_prev, rng, shape)

    def logpdf(x):
        return fk.logpdf(t, x_prev, x)

    return sampler, logpdf


# ---------------------------------------------------------------------------
# SMC


@dataclass(frozen=True)
class ParticleSystem:
    particles: np.ndarray  # (..., T + 1, N, d)
    log_weights: np.ndarray  # (..., T + 1, N), unnormalized
    ancestors: np.ndarray  # (..., T, N); ancestors[t] are the parents of step t + 1
    log_likelihood: np.ndarray


def _normalize(logw: np.ndarray, t: int) -> np.ndarray:
    m = logw.max(-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateWeightsError(t)
    w = np.exp(logw - m)
    return w / w.sum(-1, keepdims=True)


def categorical(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``weights`` (..., N) normalized, ``uniforms`` (..., k)."""
    cdf = np.cumsum(weights, -1)
    # index i satisfies cdf[i-1] <= u < cdf[i], so zero-weight slots are never hit
    idx = (uniforms[..., :, None] * cdf[..., -1:, None] >= cdf[..., None, :]).sum(-1)
    return np.minimum(idx, weights.shape[-1] - 1)


def _run_forward(fk: FeynmanKacModel, N: int, rng: RngStream, batch: tuple, ref: Optional[np.ndarray]):
    T, d = fk.T, fk.dx
    xs = np.empty(batch + (T + 1, N, d))
    lws = np.empty(batch + (T + 1, N))
    anc = np.empty(batch + (T, N), dtype=int)
    shape = batch + (N, d)
    x = fk.sample(0, None, rng.child("prop", 0), shape)
    if ref is not None:
        x[..., 0, :] = ref[..., 0, :]
    lw = fk.log_potential(0, None, x)
    xs[..., 0, :, :], lws[..., 0, :] = x, lw
    loglik = logsumexp(lw, -1) - np.log(N)
    for t in range(1, T + 1):
        W = _normalize(lw, t - 1)
        a = categorical(W, rng.child("res", t).uniform_like(batch + (N,)))
        if ref is not None:
            a[..., 0] = 0
        x_prev = np.take_along_axis(x, a[..., None], -2)
        x = fk.sample(t, x_prev, rng.child("prop", t), shape)
        if ref is not None:
            x[..., 0, :] = ref[..., t, :]
        lw = fk.log_potential(t, x_prev, x)
        xs[..., t, :, :], lws[..., t, :], anc[..., t - 1, :] = x, lw, a
        loglik = loglik + logsumexp(lw, -1) - np.log(N)
    _normalize(lw, T)
    return ParticleSystem(xs, lws, anc, loglik)


def smc(fk: FeynmanKacModel, N: int, rng: RngStream, batch: tuple = ()) -> ParticleSystem:
    """Bootstrap-style SMC with multinomial resampling at every step.

    The log-likelihood estimate is ``sum_t log mean_i G_t^i``.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    batch = tuple(np.broadcast_shapes(tuple(batch), rng.batch_shape))
    return _run_forward(fk, N, rng, batch, None)


def backward_indices(fk: FeynmanKacModel, ps: ParticleSystem, rng: RngStream) -> np.ndarray:
    """Backward-sampled particle index per step, shape ``(..., T + 1)``.

    Index at ``t`` is drawn with probability proportional to
    ``W_t^i M_{t+1}(x_t^i, x_{t+1}) G_{t+1}(x_t^i, x_{t+1})`` given the
    already chosen ``x_{t+1}``; uniforms come from ``("bsi", t)``.
    """
    T = fk.T
    xs, lws = ps.particles, ps.log_weights
    batch = lws.shape[:-2]
    idx = np.empty(batch + (T + 1,), dtype=int)
    W = _normalize(lws[..., T, :], T)
    b = categorical(W, rng.child("bsi", T).uniform_like(batch + (1,)))[..., 0]
    idx[..., T] = b
    for t in range(T - 1, -1, -1):
        x_next = np.take_along_axis(xs[..., t + 1, :, :], b[..., None, None], -2)  # (..., 1, d)
        x_t = xs[..., t, :, :]
        logw = lws[..., t, :] + fk.logpdf(t + 1, x_t, x_next) + fk.log_potential(t + 1, x_t, x_next)
        W = _normalize(logw, t)
        b = categorical(W, rng.child("bsi", t).uniform_like(batch + (1,)))[..., 0]
        idx[..., t] = b
    return idx


def csmc_step(fk: FeynmanKacModel, x_ref: Trajectory, N: int, rng: RngStream) -> tuple:
    """Conditional SMC with backward sampling; returns ``(trajectory, particle system)``.

    Slot 0 carries ``x_ref`` at every step and is never resampled away.
    The kernel leaves the FK path measure invariant.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    x_ref = np.asarray(x_ref, float)
    batch = tuple(np.broadcast_shapes(x_ref.shape[:-2], rng.batch_shape))
    ref = np.broadcast_to(x_ref, batch + x_ref.shape[-2:])
    ps = _run_forward(fk, N, rng, batch, ref)
    if N == 1:
        return ref.copy(), ps
    idx = backward_indices(fk, ps, rng)
    traj = np.take_along_axis(ps.particles, idx[..., None, None], -2)[..., 0, :]
    return traj, ps


# ---------------------------------------------------------------------------
# auxiliary particle Gibbs


@dataclass(frozen=True)
class PGState:
    """Reference path(s) of auxiliary particle Gibbs chains.

    ``update_rate`` is the last step's fraction of time steps whose state
    changed; ``n_changed`` counts steps where any state changed.
    """

    x: np.ndarray
    delta: np.ndarray
    u: Optional[np.ndarray] = None
    iteration: int = 0
    n_changed: np.ndarray = None
    update_rate: np.ndarray = None
    changed: np.ndarray = None


def init_pg_state(x: np.ndarray, delta) -> PGState:
    x = np.array(x, float)
    batch = x.shape[:-2]
    return PGState(
        x=x, delta=np.broadcast_to(np.asarray(delta, float), batch).copy(),
        n_changed=np.zeros(batch, int), update_rate=np.zeros(batch), changed=np.zeros(batch, bool),
    )


def aux_pgibbs_step(
    target: GenSSMTarget,
    pg: PGState,
    N: int,
    rng: RngStream,
    mode: str = "prior",
    grad_at: str = "u",
) -> PGState:
    """Draw ``u | x``, then one conditional SMC sweep on the auxiliary FK model."""
    x = pg.x
    T1 = x.shape[-2]
    xi = stream_normals(rng.child("aux"), "aux", np.arange(T1), x.shape[:-2] + x.shape[-1:])
    u = x + np.sqrt(0.5 * pg.delta)[..., None, None] * xi
    fk = AuxiliaryFK(target, u, pg.delta, mode, grad_at)
    traj, _ = csmc_step(fk, x, N, rng.child("csmc"))
    moved = np.any(traj != x, axis=-1)
    changed = moved.any(-1)
    return replace(
        pg, x=traj, u=u, iteration=pg.iteration + 1, n_changed=pg.n_changed + changed,
        update_rate=moved.mean(-1), changed=changed,
    )


def adapt_pg_delta(pg: PGState, target_rate: float = 0.5) -> PGState:
    """Robbins-Monro tuning of ``delta`` on the per-step update fraction."""
    n = max(pg.iteration, 1)
    return replace(pg, delta=pg.delta * np.exp(n ** -0.6 * (pg.update_rate - target_rate)))


# ---------------------------------------------------------------------------
# pseudo-marginal potentials


class PseudoMarginalFK(FeynmanKacModel):
    """Extended FK model on ``(x_t, e_t)`` with an estimated potential.

    ``estimator(t, x_prev, x, e)`` returns non-negative estimates whose
    expectation over ``e ~ noise_sampler`` is ``exp(base.log_potential)``.
    The noise is appended to the state so a reference path keeps it.
    """

    def __init__(self, base: FeynmanKacModel, estimator: Callable, noise_dim: int,
                 noise_sampler: Callable, noise_logpdf: Optional[Callable] = None):
        self.base = base
        self.estimator = estimator
        self.noise_dim = noise_dim
        self.noise_sampler = noise_sampler
        self.noise_logpdf = noise_logpdf
        self.T = base.T
        self.dx = base.dx + noise_dim
        self.dynamics_gaussian = base.dynamics_gaussian

    def _split(self, z):
        if z is None:
            return None, None
        return z[..., : self.base.dx], z[..., self.base.dx:]

    def sample(self, t, x_prev, rng, shape):
        xp, _ = self._split(x_prev)
        x = self.base.sample(t, xp, rng.child("x"), shape[:-1] + (self.base.dx,))
        e = self.noise_sampler(t, rng.child("noise"), shape[:-1] + (self.noise_dim,))
        return np.concatenate([x, e], -1)

    def logpdf(self, t, x_prev, x):
        xp, _ = self._split(x_prev)
        xx, e = self._split(x)
        lp = self.base.logpdf(t, xp, xx)
        if self.noise_logpdf is not None:
            lp = lp + self.noise_logpdf(t, e)
        return lp

    def log_potential(self, t, x_prev, x):
        xp, _ = self._split(x_prev)
        xx, e = self._split(x)
        est = np.asarray(self.estimator(t, xp, xx, e), float)
        if np.any(est < 0):
            raise ValueError(f"potential estimator returned a negative value at step {t}")
        with np.errstate(divide="ignore"):
            return np.log(est)


def pm_potential(estimator: Callable, noise_dim: int, noise_sampler: Callable,
                 noise_logpdf: Optional[Callable] = None) -> Callable[[FeynmanKacModel], PseudoMarginalFK]:
    """Wrap a potential estimator; the result turns an FK model into its pseudo-marginal extension."""
    def wrap(base: FeynmanKacModel) -> PseudoMarginalFK:
        return PseudoMarginalFK(base, estimator, noise_dim, noise_sampler, noise_logpdf)
    return wrap


def multiplicative_noise(fk: FeynmanKacModel, values=(0.5, 1.5)) -> PseudoMarginalFK:
    """Estimator ``G_t * e`` with ``e`` uniform on ``values`` (which must average to 1)."""
    values = np.asarray(values, float)
    if not np.isclose(values.mean(), 1.0):
        raise ValueError("noise values must have mean one")

    def noise_sampler(t, rng, shape):
        k = categorical(np.full(values.size, 1.0 / values.size), rng.uniform_like(shape))
        return values[k]

    def estimator(t, x_prev, x, e):
        return np.exp(fk.log_potential(t, x_prev, x)) * e[..., 0]

    def noise_logpdf(t, e):
        return np.full(e.shape[:-1], -np.log(values.size))

    return pm_potential(estimator, 1, noise_sampler, noise_logpdf)(fk)
