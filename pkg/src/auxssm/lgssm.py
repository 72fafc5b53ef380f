"""Linear-Gaussian state-space models.

States are ``x_0, ..., x_T``. Dynamics ``x_{t+1} = F_t x_t + b_t + N(0, Q_t)``
for ``t < T``; observations ``y_t = H_t x_t + c_t + N(0, R_t)`` for every
``t`` whose mask entry is set. All arrays may carry leading batch axes
(e.g. one model per MCMC chain); time is the axis just before the
vector/matrix axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gauss import (
    LOG_2PI,
    GaussParams,
    RngStream,
    cholesky,
    condition,
    mvn_logpdf,
    psd_solve,
    stream_normals,
    symmetrize,
    tri_solve,
)

# A trajectory is a plain array of shape (..., T + 1, d_x).
Trajectory = np.ndarray

DENSE_CAP = 256


def _mT(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _mv(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        # one shared matrix: a single gemm beats a stack of tiny ones
        return v @ a.T
    return (a @ v[..., None])[..., 0]


@dataclass(frozen=True)
class LGSSM:
    m0: np.ndarray
    P0: np.ndarray
    F: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    c: np.ndarray
    R: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("m0", "P0", "F", "b", "Q", "H", "c", "R"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        T, dx, dy = self.F.shape[-3], self.m0.shape[-1], self.H.shape[-2]
        checks = {
            "P0": (self.P0.shape[-2:], (dx, dx)),
            "F": (self.F.shape[-3:], (T, dx, dx)),
            "b": (self.b.shape[-2:], (T, dx)),
            "Q": (self.Q.shape[-3:], (T, dx, dx)),
            "H": (self.H.shape[-3:], (T + 1, dy, dx)),
            "c": (self.c.shape[-2:], (T + 1, dy)),
            "R": (self.R.shape[-3:], (T + 1, dy, dy)),
        }
        for name, (got, want) in checks.items():
            if tuple(got) != want:
                raise ValueError(f"{name} has trailing shape {got}, expected {want}")
        mask = np.ones(T + 1, bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (T + 1,):
            raise ValueError(f"mask must have shape ({T + 1},)")
        object.__setattr__(self, "mask", mask)

    @property
    def T(self) -> int:
        return self.F.shape[-3]

    @property
    def dx(self) -> int:
        return self.m0.shape[-1]

    @property
    def dy(self) -> int:
        return self.H.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return np.broadcast_shapes(
            self.m0.shape[:-1], self.P0.shape[:-2], self.F.shape[:-3], self.b.shape[:-2],
            self.Q.shape[:-3], self.H.shape[:-3], self.c.shape[:-2], self.R.shape[:-3],
        )

    @classmethod
    def homogeneous(cls, T, m0, P0, F, Q, H, R, b=None, c=None, mask=None) -> "LGSSM":
        """Time-invariant model; per-step arrays are broadcast views, not copies."""
        m0 = np.asarray(m0, float)
        F, Q, H, R = (np.atleast_2d(np.asarray(a, float)) for a in (F, Q, H, R))
        dx, dy = F.shape[-1], H.shape[-2]
        b = np.zeros(dx) if b is None else np.asarray(b, float)
        c = np.zeros(dy) if c is None else np.asarray(c, float)
        return cls(
            m0=m0, P0=np.atleast_2d(np.asarray(P0, float)),
            F=np.broadcast_to(F, (T, dx, dx)), b=np.broadcast_to(b, (T, dx)),
            Q=np.broadcast_to(Q, (T, dx, dx)), H=np.broadcast_to(H, (T + 1, dy, dx)),
            c=np.broadcast_to(c, (T + 1, dy)), R=np.broadcast_to(R, (T + 1, dy, dy)),
            mask=mask,
        )

    def with_mask(self, mask) -> "LGSSM":
        return LGSSM(self.m0, self.P0, self.F, self.b, self.Q, self.H, self.c, self.R, mask)


@dataclass(frozen=True)
class FilterResult:
    pred: GaussParams  # x_t | y_{0:t-1}, stacked over t (pred[0] is the prior)
    filt: GaussParams  # x_t | y_{0:t}
    log_marginal: np.ndarray


def _batch(model: LGSSM, *arrays_and_core) -> tuple:
    shapes = [model.batch_shape]
    for a, core in arrays_and_core:
        shapes.append(np.shape(a)[: np.ndim(a) - core])
    return np.broadcast_shapes(*shapes)


def kalman_filter(model: LGSSM, obs: np.ndarray) -> FilterResult:
    """Sequential covariance-form Kalman filter with Joseph-form updates."""
    obs = np.asarray(obs, dtype=float)
    T, dx, dy = model.T, model.dx, model.dy
    if obs.shape[-2:] != (T + 1, dy):
        raise ValueError(f"obs must have trailing shape {(T + 1, dy)}, got {obs.shape}")
    batch = _batch(model, (obs, 2))
    pm = np.empty(batch + (T + 1, dx))
    pP = np.empty(batch + (T + 1, dx, dx))
    fm = np.empty_like(pm)
    fP = np.empty_like(pP)
    ll = np.zeros(batch)
    eye = np.eye(dx)

    m = np.broadcast_to(model.m0, batch + (dx,))
    P = np.broadcast_to(model.P0, batch + (dx, dx))
    for t in range(T + 1):
        pm[..., t, :] = m
        pP[..., t, :, :] = P
        if model.mask[t]:
            H = model.H[..., t, :, :]
            R = model.R[..., t, :, :]
            HP = H @ P
            S = HP @ _mT(H) + R
            L = cholesky(S)
            r = obs[..., t, :] - _mv(H, m) - model.c[..., t, :]
            # one solve for both K^T = S^{-1} H P and S^{-1} r
            rhs = np.concatenate([np.broadcast_to(HP, L.shape[:-2] + HP.shape[-2:]),
                                  np.broadcast_to(r, L.shape[:-1])[..., None]], -1)
            X = np.linalg.solve(L @ _mT(L), rhs)  # the factored (possibly jittered) S
            Kt = X[..., :dx]
            K = _mT(Kt)
            m = m + _mv(K, r)
            IKH = eye - K @ H
            P = symmetrize(IKH @ P @ _mT(IKH) + K @ R @ Kt)
            ll = ll - 0.5 * np.sum(r * X[..., dx], -1) - np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1) - 0.5 * dy * LOG_2PI
        fm[..., t, :] = m
        fP[..., t, :, :] = P
        if t < T:
            F = model.F[..., t, :, :]
            m = _mv(F, m) + model.b[..., t, :]
            P = symmetrize(F @ P @ _mT(F) + model.Q[..., t, :, :])
    return FilterResult(GaussParams(pm, pP), GaussParams(fm, fP), ll)


def backward_conditionals(model: LGSSM, fr: FilterResult):
    """Affine-Gaussian laws of ``x_t | x_{t+1}, y_{0:T}`` for ``t < T``.

    Returns ``(G, c, Lam)`` stacked over time, such that
    ``x_t = G_t x_{t+1} + c_t + N(0, Lam_t)``.
    """
    m, P = fr.filt.mean[..., :-1, :], fr.filt.cov[..., :-1, :, :]
    F, b, Q = model.F, model.b, model.Q
    FP = F @ P
    pred_cov = symmetrize(FP @ _mT(F) + Q)
    G = _mT(psd_solve(pred_cov, FP))
    c = m - _mv(G, _mv(F, m) + b)
    Lam = symmetrize(P - G @ FP)
    return G, c, Lam


def rts_smoother(model: LGSSM, fr: FilterResult) -> GaussParams:
    """Rauch-Tung-Striebel smoothed marginals, stacked over time."""
    G, c, Lam = backward_conditionals(model, fr)
    ms = np.empty(fr.filt.mean.shape)
    Ps = np.empty(fr.filt.cov.shape)
    ms[..., -1, :] = fr.filt.mean[..., -1, :]
    Ps[..., -1, :, :] = fr.filt.cov[..., -1, :, :]
    for t in range(model.T - 1, -1, -1):
        Gt = G[..., t, :, :]
        ms[..., t, :] = _mv(Gt, ms[..., t + 1, :]) + c[..., t, :]
        Ps[..., t, :, :] = Gt @ Ps[..., t + 1, :, :] @ _mT(Gt) + Lam[..., t, :, :]
    return GaussParams(ms, Ps)


def _out_shape(fr: FilterResult, rng: RngStream) -> tuple:
    batch = np.broadcast_shapes(fr.filt.mean.shape[:-2], rng.batch_shape)
    return batch + fr.filt.mean.shape[-1:]


def sample_terminal(fr: FilterResult, rng: RngStream) -> np.ndarray:
    """``x_T ~ N(m_T, P_T)`` drawn from substream ``bsT``."""
    shape = _out_shape(fr, rng)
    xi = rng.child("bsT").normal_like(shape)
    L = cholesky(fr.filt.cov[..., -1, :, :], allow_singular=True)
    return fr.filt.mean[..., -1, :] + _mv(L, xi)


def backward_sample(model: LGSSM, fr: FilterResult, rng: RngStream) -> Trajectory:
    """Exact joint posterior draw by sequential backward sampling.

    Step ``t`` consumes substream ``("bs", t)``; the terminal state uses ``bsT``.
    """
    G, c, Lam = backward_conditionals(model, fr)
    chol = cholesky(Lam, allow_singular=True)
    shape = _out_shape(fr, rng)
    x = np.empty(shape[:-1] + (model.T + 1,) + shape[-1:])
    x[..., -1, :] = sample_terminal(fr, rng)
    for t in range(model.T - 1, -1, -1):
        w = _mv(chol[..., t, :, :], rng.child("bs", t).normal_like(shape))
        # c + w first, matching the association of the scan samplers
        x[..., t, :] = _mv(G[..., t, :, :], x[..., t + 1, :]) + (c[..., t, :] + w)
    return x


def backward_noise(model: LGSSM, rng: RngStream, shape: tuple) -> np.ndarray:
    """All ``("bs", t)`` draws at once, shape ``shape[:-1] + (T, d)``."""
    return stream_normals(rng, "bs", np.arange(model.T), shape)


def prior_logpdf(model: LGSSM, x: np.ndarray) -> np.ndarray:
    """``log p(x_{0:T})`` under the model dynamics."""
    lp = mvn_logpdf(x[..., 0, :], model.m0, model.P0)
    if model.T:
        mean = _mv(model.F, x[..., :-1, :]) + model.b
        lp = lp + mvn_logpdf(x[..., 1:, :], mean, model.Q).sum(-1)
    return lp


def obs_logpdf(model: LGSSM, obs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``log p(y | x_{0:T})`` over unmasked steps."""
    idx = np.flatnonzero(model.mask)
    if idx.size == 0:
        return np.zeros(np.broadcast_shapes(x.shape[:-2], model.batch_shape))
    H, c, R = model.H[..., idx, :, :], model.c[..., idx, :], model.R[..., idx, :, :]
    mean = _mv(H, x[..., idx, :]) + c
    return mvn_logpdf(np.asarray(obs)[..., idx, :], mean, R).sum(-1)


def path_logpdf(model: LGSSM, obs: np.ndarray, traj: Trajectory, fr: FilterResult) -> np.ndarray:
    """Log posterior density of ``traj``: complete-data log density minus evidence."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape[-2:] != (model.T + 1, model.dx):
        raise ValueError(f"trajectory has trailing shape {traj.shape[-2:]}")
    return prior_logpdf(model, traj) + obs_logpdf(model, obs, traj) - fr.log_marginal


def _dense_joint(model: LGSSM, obs: np.ndarray, cap: int):
    if model.batch_shape:
        raise ValueError("dense oracle takes a single (unbatched) model")
    T, dx, dy = model.T, model.dx, model.dy
    n = (T + 1) * dx
    if n > cap:
        raise ValueError(f"dense oracle size {n} exceeds cap {cap}")
    # x = mu + M eps with eps = (x_0 - m0, q_0, ..., q_{T-1})
    M = np.zeros((n, n))
    D = np.zeros((n, n))
    mu = np.zeros(n)
    M[:dx, :dx] = np.eye(dx)
    D[:dx, :dx] = model.P0
    mu[:dx] = model.m0
    for t in range(T):
        rows, nxt = slice(t * dx, (t + 1) * dx), slice((t + 1) * dx, (t + 2) * dx)
        F = model.F[t]
        M[nxt] = F @ M[rows]
        M[nxt, nxt] += np.eye(dx)
        D[nxt, nxt] = model.Q[t]
        mu[nxt] = F @ mu[rows] + model.b[t]
    cov_x = M @ D @ M.T
    idx = np.flatnonzero(model.mask)
    Hb = np.zeros((idx.size * dy, n))
    Rb = np.zeros((idx.size * dy, idx.size * dy))
    cb = np.zeros(idx.size * dy)
    for k, t in enumerate(idx):
        r = slice(k * dy, (k + 1) * dy)
        Hb[r, t * dx:(t + 1) * dx] = model.H[t]
        Rb[r, r] = model.R[t]
        cb[r] = model.c[t]
    y = np.asarray(obs, float)[idx].reshape(-1)
    return mu, cov_x, Hb, cb, Rb, y


def dense_oracle(model: LGSSM, obs: np.ndarray, cap: int = DENSE_CAP) -> GaussParams:
    """Exact joint posterior of the stacked states ``x_{0:T}`` by dense conditioning."""
    mu, cov_x, Hb, cb, Rb, y = _dense_joint(model, obs, cap)
    n = mu.size
    if y.size == 0:
        return GaussParams(mu, cov_x)
    joint = GaussParams(
        np.concatenate([mu, Hb @ mu + cb]),
        np.block([[cov_x, cov_x @ Hb.T], [Hb @ cov_x, Hb @ cov_x @ Hb.T + Rb]]),
    )
    return condition(joint, y, np.arange(n, n + y.size))


def dense_log_evidence(model: LGSSM, obs: np.ndarray, cap: int = DENSE_CAP) -> float:
    """``log p(y)`` from the dense joint Gaussian."""
    mu, cov_x, Hb, cb, Rb, y = _dense_joint(model, obs, cap)
    if y.size == 0:
        return 0.0
    return float(mvn_logpdf(y, Hb @ mu + cb, Hb @ cov_x @ Hb.T + Rb))


def random_model(rng: np.random.Generator, T: int, dx: int, dy: int, mask_prob: float = 0.0) -> tuple:
    """A random stable model and matching observations, for tests and validation."""
    def spd(d, scale):
        A = rng.normal(size=(d, d))
        return scale * (A @ A.T / d + 0.5 * np.eye(d))

    F = rng.normal(size=(T, dx, dx))
    F = 0.9 * F / np.maximum(1.0, np.abs(np.linalg.eigvals(F)).max(-1))[:, None, None]
    model = LGSSM(
        m0=rng.normal(size=dx),
        P0=spd(dx, 1.0),
        F=F,
        b=0.3 * rng.normal(size=(T, dx)),
        Q=np.stack([spd(dx, 0.5) for _ in range(T)]) if T else np.zeros((0, dx, dx)),
        H=rng.normal(size=(T + 1, dy, dx)),
        c=0.2 * rng.normal(size=(T + 1, dy)),
        R=np.stack([spd(dy, 0.5) for _ in range(T + 1)]),
        mask=rng.uniform(size=T + 1) >= mask_prob,
    )
    obs = rng.normal(size=(T + 1, dy))
    return model, obs
