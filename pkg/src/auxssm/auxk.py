"""Auxiliary Kalman MCMC kernels.

The target is augmented with auxiliary observations ``u_t ~ N(x_t, delta/2 I)``.
A step draws ``u`` given the current path, then proposes a new path from
the posterior of an LGSSM built around the current path, and corrects
with a Metropolis-Hastings ratio.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .gauss import FactorizationError, RngStream, isotropic_logpdf, mvn_logpdf, psd_solve, stream_normals
from .lgssm import LGSSM, Trajectory, _mT, _mv, backward_sample, kalman_filter, path_logpdf
from .pit import dnc_sample, prefix_sample

log = logging.getLogger(__name__)

# x (..., d), t broadcastable against x.shape[:-1]
PotentialFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LinearObs:
    """Gaussian observations ``y_t = H_t x_t + c_t + N(0, R_t)`` used as exact potentials."""

    y: np.ndarray
    H: np.ndarray
    c: np.ndarray
    R: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("y", "H", "c", "R"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        mask = np.ones(self.y.shape[0], bool) if self.mask is None else np.asarray(self.mask, bool)
        object.__setattr__(self, "mask", mask)

    def logpdf(self, x: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t)
        H = self.H[t]
        mean = _mv(H, x) + self.c[t]
        y = np.where(self.mask[t][..., None], self.y[t], mean)
        return np.where(self.mask[t], mvn_logpdf(y, mean, self.R[t]), 0.0)

    def grad(self, x: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t)
        H = self.H[t]
        mean = _mv(H, x) + self.c[t]
        y = np.where(self.mask[t][..., None], self.y[t], mean)
        g = _mv(_mT(H), psd_solve(self.R[t], (y - mean)[..., None])[..., 0])
        return np.where(self.mask[t][..., None], g, 0.0)


@dataclass(frozen=True)
class GenSSMTarget:
    """Unnormalized smoothing target over paths ``x_{0:T}``.

    ``log gamma(x) = log N(x_0; m0, P0) + sum_t log N(x_t; a_t(x_{t-1}), Q_t(x_{t-1}))
    + sum_t log g_t(x_t)``.

    Dynamics are either linear (``F``, ``b``, ``Q`` stacked over the ``T``
    transitions) or given by moment functions ``mean_fn``, ``jac_fn`` and
    ``cov_fn`` of ``(x_prev, t)`` for the transition into step ``t``.
    The potential is the optional exact Gaussian part ``obs`` plus the
    optional general part ``log_g`` (with gradient ``grad_log_g``); every
    function is vectorised over leading axes and over arrays of ``t``.
    """

    T: int
    dx: int
    m0: np.ndarray
    P0: np.ndarray
    F: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    mean_fn: Optional[PotentialFn] = None
    jac_fn: Optional[PotentialFn] = None
    cov_fn: Optional[PotentialFn] = None
    log_g: Optional[PotentialFn] = None
    grad_log_g: Optional[PotentialFn] = None
    obs: Optional[LinearObs] = None
    name: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "m0", np.asarray(self.m0, float).reshape(self.dx))
        object.__setattr__(self, "P0", np.asarray(self.P0, float).reshape(self.dx, self.dx))
        if self.F is not None:
            T, d = self.T, self.dx
            F = np.broadcast_to(np.asarray(self.F, float), (T, d, d))
            b = np.zeros((T, d)) if self.b is None else np.broadcast_to(np.asarray(self.b, float), (T, d))
            Q = np.broadcast_to(np.asarray(self.Q, float), (T, d, d))
            object.__setattr__(self, "F", F)
            object.__setattr__(self, "b", b)
            object.__setattr__(self, "Q", Q)
        elif self.mean_fn is None or self.jac_fn is None or self.cov_fn is None:
            raise ValueError("give either linear dynamics (F, Q) or mean_fn, jac_fn and cov_fn")
        if (self.log_g is None) != (self.grad_log_g is None):
            raise ValueError("log_g and grad_log_g go together")

    @classmethod
    def from_lgssm(cls, model: LGSSM, obs: np.ndarray, name: str = "lgssm") -> "GenSSMTarget":
        return cls(
            T=model.T, dx=model.dx, m0=model.m0, P0=model.P0, F=model.F, b=model.b, Q=model.Q,
            obs=LinearObs(obs, model.H, model.c, model.R, model.mask), name=name,
        )

    @property
    def linear_dynamics(self) -> bool:
        return self.F is not None

    # -- dynamics -------------------------------------------------------------

    def transition_mean(self, x_prev: np.ndarray, t) -> np.ndarray:
        if self.linear_dynamics:
            t = np.asarray(t)
            return _mv(self.F[t - 1], x_prev) + self.b[t - 1]
        return self.mean_fn(x_prev, t)

    def transition_jac(self, x_prev: np.ndarray, t) -> np.ndarray:
        if self.linear_dynamics:
            return np.broadcast_to(self.F[np.asarray(t) - 1], x_prev.shape + (self.dx,))
        return self.jac_fn(x_prev, t)

    def transition_cov(self, x_prev: np.ndarray, t) -> np.ndarray:
        if self.linear_dynamics:
            return self.Q[np.asarray(t) - 1]
        return self.cov_fn(x_prev, t)

    def log_transition(self, x_prev: np.ndarray, x: np.ndarray, t) -> np.ndarray:
        return mvn_logpdf(x, self.transition_mean(x_prev, t), self.transition_cov(x_prev, t))

    def log_prior(self, x: np.ndarray) -> np.ndarray:
        lp = mvn_logpdf(x[..., 0, :], self.m0, self.P0)
        if self.T:
            t = np.arange(1, self.T + 1)
            lp = lp + self.log_transition(x[..., :-1, :], x[..., 1:, :], t).sum(-1)
        return lp

    # -- potentials -----------------------------------------------------------

    def nonlinear_log_g(self, x: np.ndarray, t) -> np.ndarray:
        if self.log_g is None:
            return np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(t)))
        return self.log_g(x, t)

    def nonlinear_grad(self, x: np.ndarray, t) -> np.ndarray:
        if self.grad_log_g is None:
            return np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(t)) + (self.dx,))
        return self.grad_log_g(x, t)

    def log_potential(self, x: np.ndarray, t) -> np.ndarray:
        lp = self.nonlinear_log_g(x, t)
        if self.obs is not None:
            lp = lp + self.obs.logpdf(x, t)
        return lp

    def grad_log_potential(self, x: np.ndarray, t) -> np.ndarray:
        g = self.nonlinear_grad(x, t)
        if self.obs is not None:
            g = g + self.obs.grad(x, t)
        return g

    def log_gamma(self, x: np.ndarray) -> np.ndarray:
        t = np.arange(self.T + 1)
        return self.log_prior(x) + self.log_potential(x, t).sum(-1)


def gradient_error(target: GenSSMTarget, x: np.ndarray, h_rel: float = 1e-5) -> float:
    """Largest relative error of the analytic potential gradient against central differences.

    ``x`` is a full path; the step for coordinate ``x_i`` is ``h_rel * (1 + |x_i|)``.
    Also checks the dynamics Jacobian when moment functions are given.
    """
    x = np.asarray(x, float)
    t = np.arange(target.T + 1)
    analytic = target.grad_log_potential(x, t)
    numeric = np.empty_like(analytic)
    jac_num = None
    if not target.linear_dynamics and target.T:
        tt = np.arange(1, target.T + 1)
        jac = target.transition_jac(x[:-1], tt)
        jac_num = np.empty_like(jac)
    for i in range(target.dx):
        h = h_rel * (1.0 + np.abs(x[..., i]))
        step = np.zeros_like(x)
        step[..., i] = h
        numeric[..., i] = (target.log_potential(x + step, t) - target.log_potential(x - step, t)) / (2 * h)
        if jac_num is not None:
            hp = h[:-1, None]
            jac_num[..., i] = (target.transition_mean(x[:-1] + step[:-1], tt)
                               - target.transition_mean(x[:-1] - step[:-1], tt)) / (2 * hp)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    worst = float(err.max(initial=0.0))
    if jac_num is not None:
        err_j = np.abs(jac - jac_num) / np.maximum(1.0, np.abs(jac_num))
        worst = max(worst, float(err_j.max(initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class AuxChainState:
    """State of one or more (batched) auxiliary Kalman chains.

    ``x`` has shape ``(..., T + 1, d)`` and ``delta`` the batch shape.
    ``log_gamma`` and ``grad`` cache the target at ``x``.
    """

    x: np.ndarray
    delta: np.ndarray
    log_gamma: np.ndarray
    grad: np.ndarray
    iteration: int = 0
    n_accept: np.ndarray = None
    n_nonfinite: np.ndarray = None
    n_failed: int = 0
    accepted: np.ndarray = None
    log_alpha: np.ndarray = None

    @property
    def acceptance_rate(self) -> np.ndarray:
        return self.n_accept / max(self.iteration, 1)


def init_state(target: GenSSMTarget, x: np.ndarray, delta) -> AuxChainState:
    x = np.array(x, dtype=float)
    batch = x.shape[:-2]
    t = np.arange(target.T + 1)
    return AuxChainState(
        x=x,
        delta=np.broadcast_to(np.asarray(delta, float), batch).copy(),
        log_gamma=target.log_gamma(x),
        grad=target.nonlinear_grad(x, t),
        n_accept=np.zeros(batch, int),
        n_nonfinite=np.zeros(batch, int),
        accepted=np.zeros(batch, bool),
        log_alpha=np.zeros(batch),
    )


def sample_aux_obs(state: AuxChainState, rng: RngStream) -> np.ndarray:
    """``u_t = x_t + sqrt(delta/2) xi_t`` with ``xi_t`` from substream ``("aux", t)``."""
    x = state.x
    T1 = x.shape[-2]
    shape = x.shape[:-2] + x.shape[-1:]
    xi = stream_normals(rng, "aux", np.arange(T1), shape)
    scale = np.sqrt(0.5 * np.asarray(state.delta))[..., None, None]
    return x + scale * xi


def build_aux_lgssm(
    target: GenSSMTarget,
    x: np.ndarray,
    u: np.ndarray,
    delta,
    grad: Optional[np.ndarray] = None,
    first_order: bool = True,
) -> tuple:
    """LGSSM whose posterior is the proposal given ``u``, linearized at ``x``.

    Returns ``(model, obs)``. The pseudo-observation of step ``t`` is
    ``z_t = u_t + (delta/2) grad log g_t(x_t)`` with noise ``(delta/2) I``;
    exact Gaussian observations of the target are stacked on top of it
    unchanged. Moment-function dynamics are linearized at ``x``.
    """
    T, d = target.T, target.dx
    x = np.asarray(x, float)
    batch = np.broadcast_shapes(x.shape[:-2], u.shape[:-2], np.shape(delta))
    half = 0.5 * np.broadcast_to(np.asarray(delta, float), batch)
    if first_order:
        if grad is None:
            grad = target.nonlinear_grad(x, np.arange(T + 1))
        z = u + half[..., None, None] * grad
    else:
        z = np.broadcast_to(u, batch + (T + 1, d))

    if target.linear_dynamics:
        F, b, Q = target.F, target.b, target.Q
    else:
        tt = np.arange(1, T + 1)
        xp = x[..., :-1, :]
        F = target.transition_jac(xp, tt)
        b = target.transition_mean(xp, tt) - _mv(F, xp)
        Q = np.broadcast_to(target.transition_cov(xp, tt), xp.shape + (d,))

    eye = np.eye(d)
    R_aux = half[..., None, None, None] * eye
    if target.obs is None:
        H = np.broadcast_to(eye, (T + 1, d, d))
        c = np.zeros((T + 1, d))
        R = np.broadcast_to(R_aux, batch + (T + 1, d, d))
        obs = z
        mask = None
    else:
        o = target.obs
        dy = o.y.shape[-1]
        on = o.mask[:, None]
        Hy = np.where(on[..., None], o.H, 0.0)
        H = np.concatenate([Hy, np.broadcast_to(eye, (T + 1, d, d))], -2)
        c = np.concatenate([np.where(on, o.c, 0.0), np.zeros((T + 1, d))], -1)
        R = np.zeros(batch + (T + 1, dy + d, dy + d))
        R[..., :dy, :dy] = o.R
        R[..., dy:, dy:] = R_aux
        y = np.broadcast_to(np.where(on, o.y, 0.0), batch + (T + 1, dy))
        obs = np.concatenate([y, z], -1)
        mask = None
    model = LGSSM(m0=target.m0, P0=target.P0, F=F, b=b, Q=Q, H=H, c=c, R=R, mask=mask)
    return model, obs


_BACKENDS = {"sequential": backward_sample, "prefix": prefix_sample, "dnc": dnc_sample}


def kernel_step(
    target: GenSSMTarget,
    state: AuxChainState,
    rng: RngStream,
    backend: str = "sequential",
    first_order: bool = True,
    workers: int = 1,
) -> AuxChainState:
    """One auxiliary Kalman Metropolis-Hastings step for every chain in ``state``.

    Substreams: ``aux`` (auxiliary observations), ``prop`` (proposal path)
    and ``accept`` (MH uniform).
    """
    sampler = _BACKENDS[backend]
    T = target.T
    tt = np.arange(T + 1)
    x, delta = state.x, state.delta
    half = 0.5 * delta
    u = sample_aux_obs(state, rng.child("aux"))
    batch = x.shape[:-2]
    try:
        model, z = build_aux_lgssm(target, x, u, delta, state.grad, first_order)
        fr = kalman_filter(model, z)
        kw = {} if backend == "sequential" else {"workers": workers}
        x_new = sampler(model, fr, rng.child("prop"), **kw)
        with np.errstate(all="ignore"):
            lg_new = target.log_gamma(x_new)
            grad_new = target.nonlinear_grad(x_new, tt)
        finite = np.isfinite(lg_new) & np.all(np.isfinite(grad_new), axis=(-1, -2))
        x_safe = np.where(finite[..., None, None], x_new, x)
        grad_safe = np.where(finite[..., None, None], grad_new, state.grad)
        model_new, z_new = build_aux_lgssm(target, x_safe, u, delta, grad_safe, first_order)
        fr_new = kalman_filter(model_new, z_new)
        fwd = state.log_gamma + isotropic_logpdf(u, x, half[..., None]).sum(-1) + path_logpdf(model, z, x_new, fr)
        rev = lg_new + isotropic_logpdf(u, x_new, half[..., None]).sum(-1) + path_logpdf(model_new, z_new, x, fr_new)
        with np.errstate(invalid="ignore"):
            log_alpha = np.where(finite, rev - fwd, -np.inf)
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        failed = 0
    except FactorizationError as exc:
        log.debug("proposal factorization failed: %s", exc)
        x_new, lg_new, grad_new = x, state.log_gamma, state.grad
        finite = np.zeros(batch, bool)
        log_alpha = np.full(batch, -np.inf)
        failed = 1
    accept = np.log(rng.child("accept").uniform_like(batch)) < log_alpha
    acc3 = accept[..., None, None]
    return replace(
        state,
        x=np.where(acc3, x_new, x),
        log_gamma=np.where(accept, lg_new, state.log_gamma),
        grad=np.where(acc3, grad_new, state.grad),
        iteration=state.iteration + 1,
        n_accept=state.n_accept + accept,
        n_nonfinite=state.n_nonfinite + (~finite & (failed == 0)),
        n_failed=state.n_failed + failed,
        accepted=accept,
        log_alpha=log_alpha,
    )


def adapt_delta(state: AuxChainState, target_rate: float = 0.5, indicator: Optional[np.ndarray] = None) -> AuxChainState:
    """Robbins-Monro update ``log delta += n^-0.6 (indicator - target_rate)``.

    ``n`` is the 1-based iteration count of ``state``; by default the
    indicator is the last step's acceptance. Call during burn-in only.
    """
    acc = state.accepted if indicator is None else indicator
    n = max(state.iteration, 1)
    step = n ** -0.6 * (np.asarray(acc, float) - target_rate)
    return replace(state, delta=state.delta * np.exp(step))
