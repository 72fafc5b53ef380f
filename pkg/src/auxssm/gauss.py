"""Multivariate Gaussian primitives and counter-based random streams.

Every array function in this package accepts arbitrary leading batch
dimensions; vectors live on the last axis and matrices on the last two.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtri

LOG_2PI = float(np.log(2.0 * np.pi))

# relative diagonal jitter tried in order when a plain Cholesky fails
JITTER = (0.0, 1e-10, 1e-8)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a covariance cannot be factorized even after jitter."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _add_jitter(cov: np.ndarray, eps: float) -> np.ndarray:
    if eps == 0.0:
        return cov
    d = cov.shape[-1]
    scale = np.trace(cov, axis1=-2, axis2=-1) / d
    return cov + (eps * scale)[..., None, None] * np.eye(d)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor of a (possibly singular) PSD matrix via eigh."""
    lam, vec = np.linalg.eigh(cov)
    tol = 1e-8 * max(float(np.max(np.abs(lam), initial=0.0)), 1e-300)
    if lam.min(initial=0.0) < -tol:
        raise FactorizationError("covariance is not positive semi-definite")
    return vec * np.sqrt(np.clip(lam, 0.0, None))[..., None, :]


def stream_normals(rng: "RngStream", label, indices, shape: Sequence[int]) -> np.ndarray:
    """Normals for the substreams ``(label, i)``, ``i`` in ``indices``.

    Substream ``i`` fills ``shape`` exactly as ``rng.child(label, i).normal_like(shape)``
    would; the results are stacked on a new axis just before the last one.
    """
    indices = np.asarray(indices)
    shape = tuple(shape)
    nb = rng.key.ndim
    if shape[:nb] != rng.key.shape:
        raise ValueError(f"stream batch {rng.key.shape} does not lead shape {shape}")
    draws = rng.child(label, indices).normal(shape[nb:])
    # draws: rng batch + (n,) + rest; move n next to the vector axis
    return np.moveaxis(draws, nb, -2)


def _cholesky_single(cov: np.ndarray, allow_singular: bool) -> np.ndarray:
    for eps in JITTER:
        try:
            return np.linalg.cholesky(_add_jitter(cov, eps))
        except np.linalg.LinAlgError:
            pass
    if allow_singular:
        return _psd_factor(cov)
    raise FactorizationError("covariance not factorizable after jitter")


def cholesky(cov: np.ndarray, allow_singular: bool = False) -> np.ndarray:
    """Jittered Cholesky factor ``L`` with ``L @ L.T ~= cov``.

    Jitter ``eps * trace(cov) / d`` is added only after a plain attempt
    fails. Failing matrices are
    retried one at a time so a factor never depends on its batch
    neighbours. With ``allow_singular`` a rank-deficient PSD matrix
    falls back to a (non-triangular) eigen square root.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    if not np.all(np.isfinite(cov)):
        raise FactorizationError("non-finite covariance")
    try:
        return np.linalg.cholesky(_add_jitter(cov, JITTER[0]))
    except np.linalg.LinAlgError:
        pass
    if cov.ndim == 2:
        return _cholesky_single(cov, allow_singular)
    flat = cov.reshape(-1, *cov.shape[-2:])
    out = np.stack([_cholesky_single(c, allow_singular) for c in flat])
    return out.reshape(cov.shape)


def _psd_solve_single(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    for eps in JITTER:
        aj = _add_jitter(a, eps)
        try:
            np.linalg.cholesky(aj)
        except np.linalg.LinAlgError:
            continue
        return np.linalg.solve(aj, b)
    return np.linalg.pinv(a, hermitian=True) @ b


def psd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric PSD ``a`` (batched).

    Uses the jittered matrix when it is positive definite; singular
    matrices (e.g. exactly zero covariances) fall back to the
    pseudo-inverse, one matrix at a time.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    aj = _add_jitter(a, JITTER[0])
    try:
        np.linalg.cholesky(aj)
        return np.linalg.solve(aj, b)
    except np.linalg.LinAlgError:
        pass
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a_flat = np.broadcast_to(a, shape + a.shape[-2:]).reshape(-1, *a.shape[-2:])
    b_flat = np.broadcast_to(b, shape + b.shape[-2:]).reshape(-1, *b.shape[-2:])
    out = np.stack([_psd_solve_single(ai, bi) for ai, bi in zip(a_flat, b_flat)])
    return out.reshape(shape + out.shape[-2:])


def tri_solve(chol: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``chol^{-1} v`` for a batch of vectors ``v``."""
    if chol.shape[:-2] != v.shape[:-1]:
        # fewer factors than vectors: invert each factor once, then multiply
        return (np.linalg.inv(chol) @ v[..., None])[..., 0]
    return np.linalg.solve(chol, v[..., None])[..., 0]


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of ``N(mean, cov)`` at ``x`` over the last axis."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[-1]
    if x.shape[-1] != d or mean.shape[-1] != d:
        raise ValueError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    chol = cholesky(cov)
    diff = x - mean
    z = tri_solve(chol, diff)
    half_logdet = np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * np.sum(z * z, -1) - half_logdet - 0.5 * d * LOG_2PI


def isotropic_logpdf(x: np.ndarray, mean: np.ndarray, var) -> np.ndarray:
    """Log density of ``N(mean, var * I)``; ``var`` broadcasts over the batch."""
    diff = np.asarray(x) - np.asarray(mean)
    d = diff.shape[-1]
    var = np.asarray(var, dtype=float)
    return -0.5 * np.sum(diff * diff, -1) / var - 0.5 * d * (LOG_2PI + np.log(var))


@dataclass(frozen=True)
class GaussParams:
    """Mean and covariance of a (possibly batched) multivariate normal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = symmetrize(np.asarray(self.cov, dtype=float))
        if cov.shape[-2:] != (mean.shape[-1], mean.shape[-1]):
            raise ValueError(f"mean {mean.shape} and cov {cov.shape} are inconsistent")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx) -> "GaussParams":
        return GaussParams(self.mean[idx], self.cov[idx])


def logpdf(x: np.ndarray, p: GaussParams) -> np.ndarray:
    return mvn_logpdf(x, p.mean, p.cov)


def sample(p: GaussParams, rng: "RngStream") -> np.ndarray:
    """Draw ``mean + L xi``; a zero covariance returns the mean exactly.

    A batched ``rng`` broadcasts against the batch shape of ``p``.
    """
    chol = cholesky(p.cov, allow_singular=True)
    shape = np.broadcast_shapes(rng.batch_shape, p.mean.shape[:-1]) + p.mean.shape[-1:]
    xi = rng.normal_like(shape)
    return p.mean + (chol @ xi[..., None])[..., 0]


def condition(joint: GaussParams, observed_b: np.ndarray, b_idx: Sequence[int]) -> GaussParams:
    """Condition a joint Gaussian on the coordinates ``b_idx`` taking ``observed_b``.

    Returns the law of the remaining coordinates, in their original order.
    """
    d = joint.dim
    b_idx = np.asarray(b_idx, dtype=int)
    if b_idx.size == 0:
        return joint
    a_idx = np.setdiff1d(np.arange(d), b_idx)
    observed_b = np.asarray(observed_b, dtype=float)
    if observed_b.shape[-1] != b_idx.size:
        raise ValueError("observed block has the wrong size")
    m, s = joint.mean, joint.cov
    s_ab = s[..., a_idx[:, None], b_idx]
    s_bb = s[..., b_idx[:, None], b_idx]
    s_aa = s[..., a_idx[:, None], a_idx]
    try:
        np.linalg.cholesky(_add_jitter(symmetrize(s_bb), JITTER[-1]))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("conditioning block is singular") from exc
    gain_t = psd_solve(s_bb, np.swapaxes(s_ab, -1, -2))
    resid = observed_b - m[..., b_idx]
    mean = m[..., a_idx] + (np.swapaxes(gain_t, -1, -2) @ resid[..., None])[..., 0]
    cov = s_aa - np.swapaxes(gain_t, -1, -2) @ s_bb @ gain_t
    return GaussParams(mean, cov)


# ---------------------------------------------------------------------------
# counter-based random streams

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, wrapping uint64 arithmetic
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _label_code(label: Union[str, int]) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode()) & 0xFFFFFFFF
    return int(label) & 0xFFFFFFFF


def _root_key(seed: int) -> np.ndarray:
    digest = hashlib.blake2b(int(seed).to_bytes(16, "little", signed=True), digest_size=8).digest()
    return np.array(int.from_bytes(digest, "little"), dtype=np.uint64).reshape(())


@dataclass(frozen=True)
class RngStream:
    """Immutable descriptor of a random substream.

    Values are a pure function of ``(seed, path, counter)``: the key is a
    hash of the path, and draw ``i`` is a hash of ``(key, counter + i)``.
    ``key`` may be an array, in which case the stream is a batch of
    independent substreams and draws carry the batch shape in front.
    """

    seed: int
    path: tuple = ()
    counter: int = 0
    key: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.key is None:
            key = _root_key(self.seed)
            for label, index in self.path:
                key = _child_key(key, label, index)
            object.__setattr__(self, "key", key)

    @property
    def batch_shape(self) -> tuple:
        return self.key.shape

    def child(self, label: Union[str, int], index=0) -> "RngStream":
        """Substream addressed by ``(label, index)``; ``index`` may be an array.

        With an array index the new stream is batched with shape
        ``batch_shape + index.shape``.
        """
        key = _child_key(self.key, label, index)
        if np.ndim(index) == 0:
            path = self.path + ((label, int(index)),)
        else:
            path = self.path + ((label, tuple(np.asarray(index).ravel().tolist())),)
        return RngStream(self.seed, path, 0, key)

    def advance(self, n: int) -> "RngStream":
        """The same stream with its draw counter moved ``n`` values ahead."""
        return RngStream(self.seed, self.path, self.counter + int(n), self.key)

    def bits(self, shape: Sequence[int] = ()) -> np.ndarray:
        shape = (int(shape),) if np.ndim(shape) == 0 and shape != () else tuple(shape)
        n = int(np.prod(shape, dtype=int))
        if self.key.ndim == 0 and n <= 32:
            k = int(self.key)
            vals = [
                _mix_int((_mix_int((k + (c + 1) * 0x9E3779B97F4A7C15) & _MASK) + 0x9E3779B97F4A7C15) & _MASK)
                for c in range(self.counter, self.counter + n)
            ]
            return np.array(vals, dtype=np.uint64).reshape(shape)
        ctr = np.arange(self.counter, self.counter + n, dtype=np.uint64) + np.uint64(1)
        z = self.key.reshape(-1, 1) + ctr[None, :] * _GOLDEN
        out = _mix(_mix(z) + _GOLDEN)
        return out.reshape(self.key.shape + shape)

    def uniform(self, shape: Sequence[int] = ()) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        b = self.bits(shape) >> _S11
        return (b.astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, shape: Sequence[int] = ()) -> np.ndarray:
        return ndtri(self.uniform(shape))

    def normal_like(self, shape: Sequence[int]) -> np.ndarray:
        """Normals filling ``shape``, whose leading axes are the batch axes."""
        shape = tuple(shape)
        nb = self.key.ndim
        if shape[:nb] != self.key.shape:
            raise ValueError(f"stream batch {self.key.shape} does not lead shape {shape}")
        return self.normal(shape[nb:])

    def uniform_like(self, shape: Sequence[int]) -> np.ndarray:
        shape = tuple(shape)
        nb = self.key.ndim
        if shape[:nb] != self.key.shape:
            raise ValueError(f"stream batch {self.key.shape} does not lead shape {shape}")
        return self.uniform(shape[nb:])


_MASK = 2**64 - 1


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _child_key(key: np.ndarray, label, index) -> np.ndarray:
    code = _label_code(label)
    key = np.asarray(key, dtype=np.uint64)
    if key.ndim == 0 and np.ndim(index) == 0:
        base = _mix_int(int(key) ^ ((code * 0x9E3779B97F4A7C15) & _MASK))
        out = _mix_int((base + (int(index) + 1) * 0x94D049BB133111EB) & _MASK)
        return np.array(out, dtype=np.uint64).reshape(())
    salt = np.uint64((code * int(_GOLDEN)) & _MASK)
    idx = np.asarray(index)
    # 1-d working arrays: 0-d uint64 arithmetic would warn on wraparound
    base = _mix(key.reshape(-1, 1) ^ salt)
    out = _mix(base + (idx.reshape(1, -1).astype(np.uint64) + np.uint64(1)) * _M2)
    return out.reshape(key.shape + idx.shape)
