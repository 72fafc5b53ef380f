"""Configuration-driven experiment runner."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .. import __version__
from ..auxk import GenSSMTarget, adapt_delta, init_state, kernel_step
from ..fkpg import adapt_pg_delta, aux_pgibbs_step, init_pg_state
from ..gauss import RngStream, cholesky
from ..lgssm import _mv
from .diagnostics import between_chain_se, ess_columns
from .models import ModelSpec, build_model, diffusion_target_factory

log = logging.getLogger(__name__)

SAMPLERS = {
    "aux-kalman-seq": ("aux", "sequential"),
    "aux-kalman-prefix": ("aux", "prefix"),
    "aux-kalman-dnc": ("aux", "dnc"),
    "pgibbs-prior": ("pg", "prior"),
    "pgibbs-gradient": ("pg", "gradient"),
    "pgibbs-adapted": ("pg", "fully-adapted"),
}
WORKERS_ENV = "AUXSSM_WORKERS"
DEFAULT_CAPS = {"T": 512, "d": 16, "N": 128, "iterations": 100_000}
MAX_FULL_TRACE = 64


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class SigmaMH:
    """Random-walk MH on the log diffusion coefficient, prior ``N(prior_mean, prior_sd^2)``."""

    step: float = 0.1
    prior_mean: float = 0.0
    prior_sd: float = 1.0


@dataclass
class RunConfig:
    model: ModelSpec
    sampler: str = "aux-kalman-seq"
    n_samples: int = 1000
    burn_in: int = 200
    n_chains: int = 1
    n_particles: int = 16
    delta_init: float = 0.1
    target_rate: float = 0.5
    seed: int = 0
    workers: int = 1
    output_dir: str = "run-output"
    trace_coords: Optional[list] = None
    sigma_mh: Optional[SigmaMH] = None
    caps: dict = field(default_factory=lambda: dict(DEFAULT_CAPS))

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {sorted(SAMPLERS)}")
        for name in ("n_samples", "burn_in"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be at least 1")
        if self.delta_init <= 0:
            raise ConfigError("delta_init must be positive")
        if not 0 < self.target_rate < 1:
            raise ConfigError("target_rate must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        caps = {**DEFAULT_CAPS, **self.caps}
        if set(caps) != set(DEFAULT_CAPS):
            raise ConfigError(f"unknown caps: {sorted(set(caps) - set(DEFAULT_CAPS))}")
        self.caps = caps
        if self.model.T > caps["T"] or self.model.d > caps["d"]:
            raise ConfigError(f"model exceeds caps T<={caps['T']}, d<={caps['d']}")
        if self.n_particles > caps["N"]:
            raise ConfigError(f"n_particles exceeds cap {caps['N']}")
        if self.burn_in + self.n_samples > caps["iterations"]:
            raise ConfigError(f"chain length exceeds cap {caps['iterations']}")
        family = SAMPLERS[self.sampler][0]
        if family == "pg" and self.n_particles < 2:
            raise ConfigError("particle Gibbs needs n_particles >= 2")
        if self.sigma_mh is not None and self.model.kind != "diffusion-smoothing":
            raise ConfigError("sigma_mh only applies to the diffusion-smoothing model")

    @property
    def chain_length(self) -> int:
        return self.burn_in + self.n_samples

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    """Build a :class:`RunConfig` from nested mappings; unknown keys are errors."""
    if not isinstance(data, dict) or "model" not in data:
        raise ConfigError("config needs a 'model' section")
    data = dict(data)
    data["model"] = _from_dict(ModelSpec, data["model"], "model")
    if data.get("sigma_mh") is not None:
        data["sigma_mh"] = _from_dict(SigmaMH, data["sigma_mh"], "sigma_mh")
    return _from_dict(RunConfig, data, "config")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return config_from_dict(data)


def resolve_workers(config_workers: int) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is None:
        return config_workers
    try:
        w = int(env)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if w < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return w


def check_compatibility(config: RunConfig, target: GenSSMTarget) -> None:
    """Reject sampler/model pairs that cannot work before any compute."""
    family, mode = SAMPLERS[config.sampler]
    if mode == "fully-adapted" and not getattr(target, "dynamics_gaussian", True):
        raise ConfigError("fully-adapted proposals need Gaussian transition densities")
    if family == "aux" and target.log_g is not None and target.grad_log_g is None:
        raise ConfigError("auxiliary Kalman samplers need the potential gradient")


def trace_coords(config: RunConfig, T: int, d: int) -> list:
    """Flattened ``t * d + i`` indices to trace."""
    n = (T + 1) * d
    if config.trace_coords is not None:
        coords = [int(c) for c in config.trace_coords]
        if any(c < 0 or c >= n for c in coords):
            raise ConfigError(f"trace_coords must lie in [0, {n})")
        return coords
    if n <= MAX_FULL_TRACE:
        return list(range(n))
    return [t * d + i for t in probe_times(T) for i in range(d)]


def probe_times(T: int, k: int = 5) -> list:
    return sorted(set(np.linspace(0, T, k).round().astype(int).tolist()))


def prior_path(target: GenSSMTarget, rng: RngStream, batch: tuple) -> np.ndarray:
    """Draw paths from the latent prior with substreams ``("init", t)``."""
    d = target.dx
    x = np.empty(batch + (target.T + 1, d))
    L0 = cholesky(target.P0, allow_singular=True)
    x[..., 0, :] = target.m0 + _mv(L0, rng.child("init", 0).normal_like(batch + (d,)))
    for t in range(1, target.T + 1):
        mean = target.transition_mean(x[..., t - 1, :], t)
        L = cholesky(np.broadcast_to(target.transition_cov(x[..., t - 1, :], t), batch + (d, d)),
                     allow_singular=True)
        x[..., t, :] = mean + _mv(L, rng.child("init", t).normal_like(batch + (d,)))
    return x


class _Chains:
    """Batched chain state for either sampler family."""

    def __init__(self, config: RunConfig, target: GenSSMTarget, x0: np.ndarray, workers: int):
        self.family, self.mode = SAMPLERS[config.sampler]
        self.config = config
        self.workers = workers
        self.state = None
        self.set_target(target, x0, config.delta_init)

    def set_target(self, target, x, delta):
        """Swap in a new target, keeping iteration counts so adaptation continues smoothly."""
        self.target = target
        old = self.state
        if self.family == "aux":
            self.state = init_state(target, x, delta)
            if old is not None:
                self.state = dataclasses.replace(
                    self.state, iteration=old.iteration, n_accept=old.n_accept, accepted=old.accepted)
        else:
            self.state = init_pg_state(x, delta)
            if old is not None:
                self.state = dataclasses.replace(
                    self.state, iteration=old.iteration, n_changed=old.n_changed, update_rate=old.update_rate)

    @property
    def x(self):
        return self.state.x

    @property
    def delta(self):
        return self.state.delta

    def step(self, rng: RngStream, adapt: bool):
        c = self.config
        if self.family == "aux":
            self.state = kernel_step(self.target, self.state, rng, backend=self.mode, workers=self.workers)
            if adapt:
                self.state = adapt_delta(self.state, c.target_rate)
            return self.state.accepted.astype(float)
        self.state = aux_pgibbs_step(self.target, self.state, c.n_particles, rng, mode=self.mode)
        if adapt:
            self.state = adapt_pg_delta(self.state, c.target_rate)
        return self.state.update_rate


def _sigma_step(chains: _Chains, sigma: float, factory, smh: SigmaMH, rng: RngStream):
    prop = sigma * math.exp(smh.step * float(rng.child("walk").normal_like(())))

    def log_post(s, target):
        lp = target.log_prior(chains.x).item()
        z = (math.log(s) - smh.prior_mean) / smh.prior_sd
        return lp - 0.5 * z * z

    t_new = factory(prop)
    log_alpha = log_post(prop, t_new) - log_post(sigma, chains.target)
    if math.log(float(rng.child("accept").uniform_like(()))) < log_alpha:
        chains.set_target(t_new, chains.x, chains.delta)
        return prop, True
    return sigma, False


def _run_batch(config, target, chain_rngs: RngStream, batch: tuple, coords, workers, factory=None):
    T, d = target.T, target.dx
    x0 = prior_path(target, chain_rngs.child("start"), batch)
    chains = _Chains(config, target, x0, workers)
    sigma = float(config.model.param("sigma")) if factory is not None else None
    n_extra = 1 if factory is not None else 0
    trace = np.empty((config.n_samples,) + batch + (len(coords) + n_extra,))
    rate_sum = np.zeros(batch)
    sigma_acc = 0
    times = {"burn_in": 0.0, "sampling": 0.0}
    for it in range(config.chain_length):
        sampling = it >= config.burn_in
        t0 = time.perf_counter()
        rng = chain_rngs.child("iter", it)
        rate = chains.step(rng, adapt=not sampling)
        if factory is not None:
            sigma, ok = _sigma_step(chains, sigma, factory, config.sigma_mh, rng.child("sigma"))
            sigma_acc += ok and sampling
        if sampling:
            rate_sum += rate
            row = chains.x.reshape(batch + ((T + 1) * d,))[..., coords]
            if factory is not None:
                row = np.concatenate([row, np.full(batch + (1,), sigma)], -1)
            trace[it - config.burn_in] = row
        times["sampling" if sampling else "burn_in"] += time.perf_counter() - t0
    rates = rate_sum / config.n_samples if config.n_samples else np.full(batch, np.nan)
    extra = {"sigma_acceptance": sigma_acc / config.n_samples if config.n_samples else None}
    return trace, rates, chains.delta, times, extra


def _stats(trace: np.ndarray) -> dict:
    """Per-chain and pooled statistics from a ``(n, C, k)`` trace array."""
    n, C, k = trace.shape
    if n == 0:
        return {
            "chains": [{"mean": None, "sd": None, "ess": None} for _ in range(C)],
            "pooled": {"mean": None, "sd": None, "se": None},
        }
    chains = []
    for c in range(C):
        s = trace[:, c, :]
        e = ess_columns(s)
        chains.append({
            "mean": s.mean(0).tolist(),
            "sd": s.std(0, ddof=1).tolist() if n > 1 else None,
            "ess": [None if math.isnan(v) else v for v in e.tolist()],
        })
    flat = trace.reshape(n * C, k)
    means = trace.mean(0)
    if C >= 2:
        se = between_chain_se(means).tolist()
    else:
        e = ess_columns(flat)
        sd = flat.std(0, ddof=1) if n > 1 else np.full(k, np.nan)
        se = [None if math.isnan(v) else v for v in (sd / np.sqrt(e)).tolist()]
    return {
        "chains": chains,
        "pooled": {
            "mean": flat.mean(0).tolist(),
            "sd": flat.std(0, ddof=1).tolist() if n * C > 1 else None,
            "se": se,
        },
    }


def trace_path(out_dir, chain: int) -> Path:
    return Path(out_dir) / f"trace_chain{chain}.csv"


def write_trace(path, trace: np.ndarray) -> None:
    """``trace`` is ``(n, k)``; header ``iter,coord_0,...``, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter"] + [f"coord_{j}" for j in range(trace.shape[1])])
        for i, row in enumerate(trace):
            w.writerow([i] + [f"{v:.17g}" for v in row])


def read_trace(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    k = len(rows[0]) - 1
    if len(rows) == 1:
        return np.empty((0, k))
    return np.array(rows[1:], dtype=float)[:, 1:]


def summary_from_traces(out_dir, n_chains: int) -> dict:
    """Recompute the statistics block of a summary from its trace files."""
    traces = [read_trace(trace_path(out_dir, c)) for c in range(n_chains)]
    return _stats(np.stack(traces, 1))


def _labels(coords, d, sigma):
    out = [f"x[{c // d},{c % d}]" for c in coords]
    return out + (["sigma"] if sigma else [])


def run(config: RunConfig) -> dict:
    """Run the configured chains, write traces and ``summary.json``, return the summary.

    Raises:
        ConfigError: for sampler/model incompatibilities, before any sampling.
    """
    workers = resolve_workers(config.workers)
    built = build_model(config.model)
    target = built.target
    check_compatibility(config, target)
    coords = trace_coords(config, target.T, target.dx)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(config.seed)
    C = config.n_chains
    t_start = time.perf_counter()
    if config.sigma_mh is None:
        rngs = root.child("chain", np.arange(C))
        trace, rates, delta, times, extra = _run_batch(config, target, rngs, (C,), coords, workers)
        extras = [extra]
    else:
        # per-chain diffusion coefficient: chains run one at a time
        factory = diffusion_target_factory(config.model, built.obs)
        parts = [
            _run_batch(config, target, root.child("chain", c), (1,), coords, workers, factory)
            for c in range(C)
        ]
        trace = np.concatenate([p[0] for p in parts], 1)
        rates = np.concatenate([p[1] for p in parts])
        delta = np.concatenate([p[2] for p in parts])
        times = {k: sum(p[3][k] for p in parts) for k in ("burn_in", "sampling")}
        extras = [p[4] for p in parts]
    for c in range(C):
        write_trace(trace_path(out, c), trace[:, c, :])
    rate_name = "acceptance_rate" if SAMPLERS[config.sampler][0] == "aux" else "update_rate"
    summary = {
        "version": __version__,
        "config": config.to_dict(),
        "workers_used": workers,
        "coords": _labels(coords, target.dx, config.sigma_mh is not None),
        "n_samples": config.n_samples,
        "n_chains": C,
        rate_name: [None if math.isnan(r) else float(r) for r in rates],
        "final_delta": [float(v) for v in np.ravel(delta)],
        "wall_time": {**times, "total": time.perf_counter() - t_start},
        **_stats(trace),
    }
    if config.sigma_mh is not None:
        summary["sigma_acceptance"] = [e["sigma_acceptance"] for e in extras]
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    log.info("wrote %d trace files and summary to %s", C, out)
    return summary
