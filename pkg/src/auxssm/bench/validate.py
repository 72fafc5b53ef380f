"""Oracle suite with a machine-readable pass/fail report."""
from __future__ import annotations

import contextlib
import math
import time
from typing import Callable

import numpy as np

from .. import __version__, lgssm, pit
from ..auxk import GenSSMTarget, gradient_error, init_state, kernel_step
from ..fkpg import PROPOSAL_MODES, aux_pgibbs_step, init_pg_state
from ..gauss import RngStream, sample
from ..lgssm import dense_log_evidence, dense_oracle, kalman_filter, random_model, rts_smoother
from .models import ModelSpec, build_model

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "passed", "items"],
    "additionalProperties": False,
    "properties": {
        "version": {"type": "string"},
        "passed": {"type": "boolean"},
        "mutation": {"type": ["string", "null"]},
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "metric", "tolerance", "seconds"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "metric": {"type": ["number", "null"]},
                    "tolerance": {"type": "number"},
                    "seconds": {"type": "number"},
                    "error": {"type": "string"},
                },
            },
        },
    },
}

MUTATIONS = ("backward-gain-sign",)


def _models(n: int, seed: int, max_T: int = 10, max_d: int = 3):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        T = int(rng.integers(1, max_T + 1))
        dx = int(rng.integers(1, max_d + 1))
        dy = int(rng.integers(1, max_d + 1))
        yield random_model(rng, T, dx, dy, mask_prob=0.2)


def _stack(p, T1, d):
    return p.mean.reshape(T1 * d), p.cov


def check_filter_evidence() -> float:
    """Kalman and parallel-filter log evidence against dense conditioning."""
    worst = 0.0
    for model, obs in _models(20, 1):
        ref = dense_log_evidence(model, obs)
        worst = max(worst, abs(kalman_filter(model, obs).log_marginal - ref),
                    abs(pit.parallel_filter(model, obs).log_marginal - ref))
    return float(worst)


def check_smoother() -> float:
    """RTS marginals against the dense joint posterior."""
    worst = 0.0
    for model, obs in _models(20, 2):
        dense = dense_oracle(model, obs)
        sm = rts_smoother(model, kalman_filter(model, obs))
        d = model.dx
        worst = max(worst, np.abs(sm.mean.reshape(-1) - dense.mean).max())
        for t in range(model.T + 1):
            blk = dense.cov[t * d:(t + 1) * d, t * d:(t + 1) * d]
            worst = max(worst, np.abs(sm.cov[t] - blk).max())
    return float(worst)


def check_law(sampler: str) -> float:
    """Exact law of a pathwise sampler against the dense posterior."""
    worst = 0.0
    for model, obs in _models(20, 3):
        law = pit.extract_affine_law(sampler, model, kalman_filter(model, obs))
        dense = dense_oracle(model, obs)
        worst = max(worst, np.abs(law.mean - dense.mean).max(), np.abs(law.cov - dense.cov).max())
    return float(worst)


def check_pathwise() -> float:
    """Sequential and prefix samplers on shared streams draw the same paths."""
    worst = 0.0
    for i, (model, obs) in enumerate(_models(20, 4, max_T=33)):
        fr = kalman_filter(model, obs)
        rng = RngStream(i).child("chain", np.arange(8))
        a = lgssm.backward_sample(model, fr, rng)
        b = pit.prefix_sample(model, fr, rng)
        worst = max(worst, np.abs(a - b).max())
    return float(worst)


def check_exact_acceptance() -> float:
    """Auxiliary Kalman MH on a linear-Gaussian target accepts with ``log alpha = 0``."""
    rng0 = np.random.default_rng(5)
    model, obs = random_model(rng0, 15, 2, 1)
    target = GenSSMTarget.from_lgssm(model, obs)
    state = init_state(target, rng0.normal(size=(16, 16, 2)), 0.5)
    worst = 0.0
    for it in range(25):
        state = kernel_step(target, state, RngStream(5).child("iter", it))
        worst = max(worst, float(np.abs(state.log_alpha).max()))
    return worst


def check_csmc_invariance(n_chains: int = 400, n_iter: int = 10) -> float:
    """Max |z| of posterior-mean errors for auxiliary particle Gibbs started at stationarity."""
    rng0 = np.random.default_rng(6)
    model, obs = random_model(rng0, 4, 1, 1)
    target = GenSSMTarget.from_lgssm(model, obs)
    post = dense_oracle(model, obs)
    x0 = sample(post, RngStream(6).child("init", np.arange(n_chains))).reshape(n_chains, model.T + 1, 1)
    worst = 0.0
    for mode in PROPOSAL_MODES:
        pg = init_pg_state(x0, 0.5)
        total = np.zeros_like(x0)
        for it in range(n_iter):
            pg = aux_pgibbs_step(target, pg, 4, RngStream(7).child("chain", np.arange(n_chains)).child("it", it), mode)
            total += pg.x
        means = (total / n_iter)[..., 0]
        se = means.std(0, ddof=1) / math.sqrt(n_chains)
        worst = max(worst, float(np.abs((means.mean(0) - post.mean) / se).max()))
    return worst


def check_gradients() -> float:
    """Finite-difference check of potential gradients on every bundled model."""
    worst = 0.0
    for kind, d in (("stochvol", 3), ("diffusion-smoothing", 3), ("spatio-temporal", 4), ("grid-1d-test", 1)):
        built = build_model(ModelSpec(kind, T=10, d=d, seed=3))
        worst = max(worst, gradient_error(built.target, built.truth))
    return float(worst)


ITEMS: list = [
    ("filter_log_evidence_vs_dense", check_filter_evidence, 1e-8),
    ("smoother_vs_dense", check_smoother, 1e-8),
    ("law_sequential_vs_dense", lambda: check_law("sequential"), 1e-8),
    ("law_prefix_vs_dense", lambda: check_law("prefix"), 1e-8),
    ("law_dnc_vs_dense", lambda: check_law("dnc"), 1e-8),
    ("pathwise_prefix_vs_sequential", check_pathwise, 1e-8),
    ("exact_case_acceptance", check_exact_acceptance, 1e-8),
    ("csmc_invariance_max_z", check_csmc_invariance, 4.5),
    ("gradient_finite_difference", check_gradients, 1e-5),
]


def _flip_gain(fn: Callable) -> Callable:
    def wrapped(*args, **kwargs):
        G, c, Lam = fn(*args, **kwargs)
        return -G, c, Lam

    return wrapped


@contextlib.contextmanager
def mutation(name: str):
    """Inject a known defect; used to check the suite catches it."""
    if name != "backward-gain-sign":
        raise ValueError(f"unknown mutation {name!r}; choose from {MUTATIONS}")
    orig = lgssm.backward_conditionals
    bad = _flip_gain(orig)
    lgssm.backward_conditionals = bad
    pit.backward_conditionals = bad
    try:
        yield
    finally:
        lgssm.backward_conditionals = orig
        pit.backward_conditionals = orig


def _run_items(items) -> list:
    out = []
    for name, fn, tol in items:
        t0 = time.perf_counter()
        entry = {"name": name, "tolerance": tol}
        try:
            metric = float(fn())
            entry["metric"] = metric if math.isfinite(metric) else None
            entry["passed"] = bool(math.isfinite(metric) and metric < tol)
        except Exception as exc:  # a crash is a failed item, not a crashed report
            entry.update(metric=None, passed=False, error=f"{type(exc).__name__}: {exc}")
        entry["seconds"] = time.perf_counter() - t0
        out.append(entry)
    return out


def validate(mutate: str | None = None, items=None) -> dict:
    """Run the oracle suite; every item is reported, failures included."""
    items = ITEMS if items is None else items
    if mutate is None:
        results = _run_items(items)
    else:
        with mutation(mutate):
            results = _run_items(items)
    return {
        "version": __version__,
        "passed": all(r["passed"] for r in results),
        "mutation": mutate,
        "items": results,
    }
