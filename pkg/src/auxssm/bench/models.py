"""Example models and model-specific oracles."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from ..auxk import GenSSMTarget, LinearObs
from ..lgssm import LGSSM, _mv, kalman_filter, random_model, rts_smoother

log = logging.getLogger(__name__)

MODEL_KINDS = ("lgssm-synthetic", "stochvol", "diffusion-smoothing", "spatio-temporal", "grid-1d-test")

DEFAULT_PARAMS = {
    "lgssm-synthetic": {"dy": 1, "mask_prob": 0.0},
    "stochvol": {"mu": 0.0, "phi": 0.9, "sigma": 0.3, "rho": 0.3, "Phi": None, "Q": None},
    "diffusion-smoothing": {
        "h": 0.02, "sigma": 1.0, "obs_every": 5, "obs_coords": [0], "obs_var": 1.0,
        "lorenz_s": 10.0, "lorenz_r": 28.0, "lorenz_b": 8.0 / 3.0,
    },
    "spatio-temporal": {"grid": 3, "rho": 0.8, "scale": 0.5, "length": 1.5, "offset": 0.0},
    "grid-1d-test": {"rho": 0.8, "sigma": 1.0, "kappa": 0.25, "obs_sd": 1.0},
}


@dataclass
class ModelSpec:
    """What to build: model kind, sizes, hyperparameters and data source."""

    kind: str
    T: int = 50
    d: int = 1
    seed: int = 0
    params: dict = field(default_factory=dict)
    data_file: Optional[str] = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        if self.T < 0 or self.d < 1:
            raise ValueError("need T >= 0 and d >= 1")
        if self.kind == "spatio-temporal":
            k = int(self.param("grid"))
            if self.d != k * k:
                self.d = k * k
        if self.kind == "diffusion-smoothing" and self.d != 3:
            raise ValueError("diffusion-smoothing is the 3-d Lorenz-63 system")
        if self.kind == "grid-1d-test" and self.d != 1:
            raise ValueError("grid-1d-test is one-dimensional")

    def param(self, name):
        return self.params.get(name, DEFAULT_PARAMS[self.kind][name])


@dataclass
class BuiltModel:
    target: GenSSMTarget
    obs: np.ndarray
    truth: Optional[np.ndarray]
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# builders


def _stochvol_target(spec: ModelSpec, y: np.ndarray) -> GenSSMTarget:
    d, T = spec.d, spec.T
    mu = float(spec.param("mu"))
    sigma = float(spec.param("sigma"))
    rho = float(spec.param("rho"))
    # full matrices override the scalar phi / sigma / rho parametrisation
    F = spec.param("Phi")
    if F is None:
        F = float(spec.param("phi")) * np.eye(d)
    elif np.ndim(F) == 0:
        F = float(F) * np.eye(d)
    F = np.asarray(F, float).reshape(d, d)
    Q = spec.param("Q")
    if Q is None:
        Q = sigma**2 * ((1 - rho) * np.eye(d) + rho * np.ones((d, d)))
    Q = np.asarray(Q, float).reshape(d, d)
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1:
        log.warning("stochvol dynamics are not stationary; initial covariance set to identity")
        P0 = np.eye(d)
    else:
        # stationary covariance: P0 = F P0 F' + Q
        P0 = scipy.linalg.solve_discrete_lyapunov(F, Q)
    b = (np.eye(d) - F) @ (mu * np.ones(d))

    def log_g(x, t):
        yt = y[t]
        return np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * x - 0.5 * yt**2 * np.exp(-x), -1)

    def grad_log_g(x, t):
        return -0.5 + 0.5 * y[t] ** 2 * np.exp(-x)

    return GenSSMTarget(T=T, dx=d, m0=mu * np.ones(d), P0=P0, F=F, b=b, Q=Q,
                        log_g=log_g, grad_log_g=grad_log_g, name="stochvol")


def _lorenz(spec: ModelSpec):
    s, r, bb = (float(spec.param(k)) for k in ("lorenz_s", "lorenz_r", "lorenz_b"))
    h, sigma = float(spec.param("h")), float(spec.param("sigma"))

    def drift(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([s * (x2 - x1), x1 * (r - x3) - x2, x1 * x2 - bb * x3], -1)

    def mean_fn(x, t):
        return x + h * drift(x)

    def jac_fn(x, t):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        one, zero = np.ones_like(x1), np.zeros_like(x1)
        J = np.stack([
            np.stack([-s * one, s * one, zero], -1),
            np.stack([r - x3, -one, -x1], -1),
            np.stack([x2, x1, -bb * one], -1),
        ], -2)
        return np.eye(3) + h * J

    def cov_fn(x, t):
        return np.broadcast_to(sigma**2 * h * np.eye(3), x.shape[:-1] + (3, 3))

    return mean_fn, jac_fn, cov_fn


def _diffusion_target(spec: ModelSpec, y: np.ndarray, sigma: Optional[float] = None) -> GenSSMTarget:
    if sigma is not None:
        spec = ModelSpec(spec.kind, spec.T, spec.d, spec.seed, {**spec.params, "sigma": sigma}, spec.data_file)
    T = spec.T
    mean_fn, jac_fn, cov_fn = _lorenz(spec)
    coords = list(spec.param("obs_coords"))
    every = int(spec.param("obs_every"))
    dy = len(coords)
    H = np.zeros((dy, 3))
    H[np.arange(dy), coords] = 1.0
    mask = (np.arange(T + 1) % every) == 0
    obs = LinearObs(
        y=y, H=np.broadcast_to(H, (T + 1, dy, 3)), c=np.zeros((T + 1, dy)),
        R=np.broadcast_to(float(spec.param("obs_var")) * np.eye(dy), (T + 1, dy, dy)), mask=mask,
    )
    return GenSSMTarget(T=T, dx=3, m0=np.array([1.0, 1.0, 25.0]), P0=4.0 * np.eye(3),
                        mean_fn=mean_fn, jac_fn=jac_fn, cov_fn=cov_fn, obs=obs, name="diffusion-smoothing")


def diffusion_target_factory(spec: ModelSpec, y: np.ndarray):
    """``sigma -> target`` for the diffusion-coefficient Gibbs block."""
    return lambda sigma: _diffusion_target(spec, y, sigma)


def matern_cov(k: int, scale: float, length: float) -> np.ndarray:
    """Matérn-3/2 covariance between the cells of a ``k x k`` grid."""
    pts = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="ij"), -1).reshape(-1, 2).astype(float)
    r = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    a = math.sqrt(3.0) * r / length
    return scale**2 * (1 + a) * np.exp(-a)


def _spatio_target(spec: ModelSpec, y: np.ndarray) -> GenSSMTarget:
    k = int(spec.param("grid"))
    d, T = k * k, spec.T
    rho = float(spec.param("rho"))
    Sigma = matern_cov(k, float(spec.param("scale")), float(spec.param("length")))
    beta = float(spec.param("offset"))
    log_fact = gammaln(y + 1)

    def log_g(x, t):
        eta = beta + x
        return np.sum(y[t] * eta - np.exp(eta) - log_fact[t], -1)

    def grad_log_g(x, t):
        return y[t] - np.exp(beta + x)

    P0 = Sigma / (1 - rho**2) if abs(rho) < 1 else Sigma.copy()
    return GenSSMTarget(T=T, dx=d, m0=np.zeros(d), P0=P0, F=rho * np.eye(d), Q=Sigma,
                        log_g=log_g, grad_log_g=grad_log_g, name="spatio-temporal")


def _grid1d_target(spec: ModelSpec, y: np.ndarray) -> GenSSMTarget:
    rho, sigma, kappa = (float(spec.param(k)) for k in ("rho", "sigma", "kappa"))

    def log_g(x, t):
        return -kappa * ((x[..., 0] - y[t][..., 0]) ** 4)

    def grad_log_g(x, t):
        return -4 * kappa * (x - y[t]) ** 3

    return GenSSMTarget(T=spec.T, dx=1, m0=np.zeros(1), P0=np.eye(1), F=rho * np.eye(1),
                        Q=sigma**2 * np.eye(1), log_g=log_g, grad_log_g=grad_log_g, name="grid-1d-test")


def _simulate_path(target: GenSSMTarget, rng: np.random.Generator) -> np.ndarray:
    x = np.empty((target.T + 1, target.dx))
    x[0] = rng.multivariate_normal(target.m0, target.P0)
    for t in range(1, target.T + 1):
        x[t] = rng.multivariate_normal(target.transition_mean(x[t - 1], t), target.transition_cov(x[t - 1], t))
    return x


def simulate(spec: ModelSpec) -> tuple:
    """Simulate ``(truth, observations)`` from ``spec`` with its seed."""
    rng = np.random.default_rng(spec.seed)
    T, d = spec.T, spec.d
    if spec.kind == "lgssm-synthetic":
        model, _ = random_model(rng, T, d, int(spec.param("dy")), float(spec.param("mask_prob")))
        tgt = GenSSMTarget.from_lgssm(model, np.zeros((T + 1, model.dy)))
        x = _simulate_path(tgt, rng)
        y = _mv(model.H, x) + model.c + np.einsum(
            "tij,tj->ti", np.linalg.cholesky(model.R), rng.normal(size=(T + 1, model.dy)))
        y[~model.mask] = np.nan
        return x, y
    if spec.kind == "stochvol":
        x = _simulate_path(_stochvol_target(spec, np.zeros((T + 1, d))), rng)
        return x, np.exp(0.5 * x) * rng.normal(size=x.shape)
    if spec.kind == "diffusion-smoothing":
        tgt = _diffusion_target(spec, np.zeros((T + 1, len(spec.param("obs_coords")))))
        x = _simulate_path(tgt, rng)
        o = tgt.obs
        y = _mv(o.H, x) + math.sqrt(float(spec.param("obs_var"))) * rng.normal(size=(T + 1, o.H.shape[-2]))
        y[~o.mask] = np.nan
        return x, y
    if spec.kind == "spatio-temporal":
        x = _simulate_path(_spatio_target(spec, np.zeros((T + 1, spec.d))), rng)
        return x, rng.poisson(np.exp(float(spec.param("offset")) + x)).astype(float)
    x = _simulate_path(_grid1d_target(spec, np.zeros((T + 1, 1))), rng)
    # observations are the centres of the quartic potentials
    return x, x + float(spec.param("obs_sd")) * rng.normal(size=x.shape)


def _lgssm_from_spec(spec: ModelSpec) -> LGSSM:
    rng = np.random.default_rng(spec.seed)
    model, _ = random_model(rng, spec.T, spec.d, int(spec.param("dy")), float(spec.param("mask_prob")))
    return model


def target_for(spec: ModelSpec, y: np.ndarray) -> GenSSMTarget:
    if spec.kind == "lgssm-synthetic":
        model = _lgssm_from_spec(spec)
        return GenSSMTarget.from_lgssm(model, np.where(np.isnan(y), 0.0, y), name="lgssm-synthetic")
    builder = {
        "stochvol": _stochvol_target,
        "diffusion-smoothing": _diffusion_target,
        "spatio-temporal": _spatio_target,
        "grid-1d-test": _grid1d_target,
    }[spec.kind]
    return builder(spec, y)


def build_model(spec: ModelSpec) -> BuiltModel:
    """Build the target for ``spec``, simulating data or loading ``spec.data_file``."""
    if spec.data_file:
        truth, y = load_data(spec.data_file)
        if y.shape[0] != spec.T + 1:
            raise ValueError(f"data file has {y.shape[0]} steps, model expects {spec.T + 1}")
    else:
        truth, y = simulate(spec)
    target = target_for(spec, y)
    if truth is not None and truth.shape != (spec.T + 1, target.dx):
        raise ValueError(f"data file latent columns do not match d={target.dx}")
    info = {"kind": spec.kind}
    if spec.kind == "lgssm-synthetic":
        model = _lgssm_from_spec(spec)
        obs = np.where(np.isnan(y), 0.0, y)
        sm = rts_smoother(model, kalman_filter(model, obs))
        info["smoother_mean"] = sm.mean
        info["smoother_var"] = np.diagonal(sm.cov, axis1=-2, axis2=-1)
    return BuiltModel(target=target, obs=y, truth=truth, info=info)


# ---------------------------------------------------------------------------
# data files


def save_data(path, truth: Optional[np.ndarray], y: np.ndarray) -> None:
    """CSV with header ``t,x_0..,y_0..``; floats written with 17 significant digits."""
    y = np.asarray(y, float)
    dx = 0 if truth is None else truth.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i}" for i in range(dx)] + [f"y_{j}" for j in range(y.shape[-1])])
        for t in range(y.shape[0]):
            row = [] if truth is None else list(truth[t])
            w.writerow([t] + [f"{v:.17g}" for v in row + list(y[t])])


def load_data(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not ycols:
        raise ValueError(f"{path}: no y_ columns")
    truth = body[:, xcols] if xcols else None
    return truth, body[:, ycols]


# ---------------------------------------------------------------------------
# oracles


def grid_smoother(target: GenSSMTarget, n_grid: int = 2000, half_width: float = 8.0) -> dict:
    """Smoothing marginals of a 1-d target by forward-backward on a uniform grid.

    Returns grid, per-step probabilities, means and variances.
    """
    if target.dx != 1:
        raise ValueError("grid oracle needs a one-dimensional target")
    sd0 = math.sqrt(float(target.P0[0, 0]))
    lo = min(float(target.m0[0]) - half_width * sd0, -half_width)
    hi = max(float(target.m0[0]) + half_width * sd0, half_width)
    g = np.linspace(lo, hi, n_grid)
    pts = g[:, None]
    T = target.T
    logpot = np.stack([target.log_potential(pts, t) for t in range(T + 1)])  # (T+1, n)
    log_init = -0.5 * (g - target.m0[0]) ** 2 / target.P0[0, 0]
    alpha = np.empty((T + 1, n_grid))
    trans = []
    a = log_init + logpot[0]
    alpha[0] = np.exp(a - a.max())
    alpha[0] /= alpha[0].sum()
    for t in range(1, T + 1):
        mean = target.transition_mean(pts, t)[:, 0]
        var = target.transition_cov(pts, t)
        var = np.broadcast_to(np.asarray(var)[..., 0, 0], mean.shape)
        K = np.exp(-0.5 * (g[None, :] - mean[:, None]) ** 2 / var[:, None]) / np.sqrt(var[:, None])
        trans.append(K)
        pred = alpha[t - 1] @ K
        w = np.log(np.maximum(pred, 1e-300)) + logpot[t]
        alpha[t] = np.exp(w - w.max())
        alpha[t] /= alpha[t].sum()
    marg = np.empty_like(alpha)
    marg[T] = alpha[T]
    beta = np.ones(n_grid)
    for t in range(T - 1, -1, -1):
        # beta_t(x) = sum_x' K(x, x') G_{t+1}(x') beta_{t+1}(x')
        nxt = np.exp(logpot[t + 1] - logpot[t + 1].max()) * beta
        beta = trans[t] @ nxt
        beta /= beta.max()
        p = alpha[t] * beta
        marg[t] = p / p.sum()
    mean = marg @ g
    var = marg @ g**2 - mean**2
    return {"grid": g, "marginals": marg, "mean": mean, "var": var}


def importance_mean_t0(target: GenSSMTarget, n: int, seed: int = 0) -> tuple:
    """Posterior mean of ``x_0`` by self-normalised importance sampling from the prior.

    Returns ``(estimate, standard error)``.
    """
    rng = np.random.default_rng(seed)
    d = target.dx
    x = np.empty((n, target.T + 1, d))
    x[:, 0] = target.m0 + rng.normal(size=(n, d)) @ np.linalg.cholesky(target.P0).T
    for t in range(1, target.T + 1):
        mean = target.transition_mean(x[:, t - 1], t)
        L = np.linalg.cholesky(target.transition_cov(x[:, t - 1], t))
        x[:, t] = mean + _mv(L, rng.normal(size=(n, d)))
    logw = target.log_potential(x, np.arange(target.T + 1)).sum(-1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ x[:, 0, 0]
    se = math.sqrt(np.sum(w**2 * (x[:, 0, 0] - est) ** 2))
    return float(est), se
