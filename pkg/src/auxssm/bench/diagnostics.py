"""MCMC output diagnostics."""
from __future__ import annotations

import numpy as np
import scipy.fft


MIN_ESS_SAMPLES = 100


class ConstantChainError(ValueError):
    """ESS is undefined for a chain with zero variance."""


def autocorrelation(chain: np.ndarray) -> np.ndarray:
    """Normalised autocorrelation of a 1-d chain at every lag, via FFT."""
    x = np.asarray(chain, float)
    x = x - x.mean()
    n = x.size
    size = scipy.fft.next_fast_len(2 * n)
    f = scipy.fft.rfft(x, size)
    acov = scipy.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        raise ConstantChainError("chain is constant")
    return acov / acov[0]


def ess(chain: np.ndarray) -> float:
    """Effective sample size with the initial positive sequence truncation.

    Lag pairs ``rho_{2m} + rho_{2m+1}`` are summed until the first non-positive
    pair. The result is clipped to ``(0, n]``.

    Raises:
        ConstantChainError: if the chain has zero variance.
        ValueError: if the chain has fewer than ``MIN_ESS_SAMPLES`` values.
    """
    x = np.asarray(chain, float).ravel()
    n = x.size
    if n < MIN_ESS_SAMPLES:
        raise ValueError(f"need at least {MIN_ESS_SAMPLES} samples, got {n}")
    if np.ptp(x) == 0:
        raise ConstantChainError("chain is constant")
    rho = autocorrelation(x)
    m = n // 2
    pairs = rho[: 2 * m : 2] + rho[1 : 2 * m : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    k = nonpos[0] if nonpos.size else m
    tau = -1.0 + 2.0 * pairs[:k].sum()
    if tau <= 0:
        return float(n)
    return float(min(n, n / tau))


def ess_columns(samples: np.ndarray) -> np.ndarray:
    """ESS of every column of a ``(n, k)`` sample array; NaN where undefined."""
    out = np.full(samples.shape[1], np.nan)
    if samples.shape[0] < MIN_ESS_SAMPLES:
        return out
    for j in range(samples.shape[1]):
        try:
            out[j] = ess(samples[:, j])
        except ConstantChainError:
            pass
    return out


def between_chain_se(chain_means: np.ndarray) -> np.ndarray:
    """Standard error of the grand mean from independent per-chain means (chains on axis 0)."""
    c = np.asarray(chain_means, float)
    if c.shape[0] < 2:
        raise ValueError("need at least two chains")
    return c.std(axis=0, ddof=1) / np.sqrt(c.shape[0])
