"""Parallel-in-time filtering and pathwise sampling for LGSSMs.

Everything here is expressed as an associative combination over a tree
whose shape depends only on the horizon, so results are reproducible for
any number of workers. Each tree level is one vectorised numpy call,
optionally split across a thread pool.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .gauss import (
    LOG_2PI,
    GaussParams,
    RngStream,
    cholesky,
    mvn_logpdf,
    psd_solve,
    stream_normals,
    symmetrize,
)
from .lgssm import (
    LGSSM,
    DENSE_CAP,
    FilterResult,
    Trajectory,
    _mT,
    _mv,
    _out_shape,
    backward_conditionals,
    backward_sample,
    sample_terminal,
)


# ---------------------------------------------------------------------------
# elements


@dataclass(frozen=True)
class AffineGaussElement:
    """The map ``z -> G z + c + N(0, Lam)``; time is the leading array axis when stacked."""

    G: np.ndarray
    c: np.ndarray
    Lam: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "AffineGaussElement":
        return cls(np.eye(d), np.zeros(d), np.zeros((d, d)))

    def compose(self, other: "AffineGaussElement") -> "AffineGaussElement":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return AffineGaussElement(*compose_affine_gauss(
            (self.G, self.c, self.Lam), (other.G, other.c, other.Lam)))

    def __getitem__(self, idx) -> "AffineGaussElement":
        return AffineGaussElement(self.G[idx], self.c[idx], self.Lam[idx])


def compose_affine_gauss(a: tuple, b: tuple) -> tuple:
    Ga, ca, La = a
    Gb, cb, Lb = b
    return Ga @ Gb, _mv(Ga, cb) + ca, symmetrize(Ga @ Lb @ _mT(Ga) + La)


def compose_affine(a: tuple, b: tuple) -> tuple:
    Ga, ca = a
    Gb, cb = b
    return Ga @ Gb, _mv(Ga, cb) + ca


@dataclass(frozen=True)
class FilterScanElement:
    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    eta: np.ndarray
    J: np.ndarray


def combine_filter(e_i: tuple, e_j: tuple) -> tuple:
    """Combine the earlier filtering element ``e_i`` with the later ``e_j``."""
    Ai, bi, Ci, etai, Ji = e_i
    Aj, bj, Cj, etaj, Jj = e_j
    d = Ai.shape[-1]
    N = np.eye(d) + Jj @ Ci  # transpose of I + C_i J_j
    AjMinv = _mT(np.linalg.solve(N, _mT(Aj)))
    rhs = np.linalg.solve(N, np.concatenate([(etaj - _mv(Jj, bi))[..., None], Jj @ Ai], -1))
    A = AjMinv @ Ai
    b = _mv(AjMinv, bi + _mv(Ci, etaj)) + bj
    C = symmetrize(AjMinv @ Ci @ _mT(Aj) + Cj)
    eta = _mv(_mT(Ai), rhs[..., 0]) + etai
    J = symmetrize(_mT(Ai) @ rhs[..., 1:] + Ji)
    return A, b, C, eta, J


# ---------------------------------------------------------------------------
# fixed-shape scans


def _run_chunked(fn: Callable[[np.ndarray], tuple], idx: np.ndarray, workers: int) -> tuple:
    """Evaluate ``fn`` on index chunks, possibly on threads, and concatenate."""
    if workers <= 1 or idx.size < 2:
        return fn(idx)
    chunks = [c for c in np.array_split(idx, min(workers, idx.size)) if c.size]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return tuple(np.concatenate(p, axis=0) for p in zip(*parts))


@lru_cache(maxsize=None)
def scan_schedule(n: int, reverse: bool) -> tuple:
    """Per-level ``(targets, partners)`` index pairs of a Sklansky scan over ``n`` items.

    Forward: ``e[t] <- op(e[partner], e[t])``; reverse: ``e[t] <- op(e[t], e[partner])``.
    There are ``ceil(log2 n)`` levels, which is the critical path length.
    """
    levels = []
    s = 1
    while s < n:
        starts = np.arange(0, n, 2 * s)
        targets, partners = [], []
        for j in starts:
            left = np.arange(j, min(j + s, n))
            right = np.arange(j + s, min(j + 2 * s, n))
            if right.size == 0:
                continue
            if reverse:
                targets.append(left)
                partners.append(np.full(left.size, j + s))
            else:
                targets.append(right)
                partners.append(np.full(right.size, j + s - 1))
        levels.append((np.concatenate(targets), np.concatenate(partners)))
        s *= 2
    return tuple(levels)


def associative_scan(
    op: Callable[[tuple, tuple], tuple],
    elems: Sequence[np.ndarray],
    reverse: bool = False,
    workers: int = 1,
    stats: Optional[dict] = None,
) -> tuple:
    """Inclusive scan along axis 0 with ``op(earlier, later)``.

    Forward returns ``e_0 ⊕ ... ⊕ e_t``; reverse returns ``e_t ⊕ ... ⊕ e_{n-1}``.
    If ``stats`` is given it receives the number of combine calls and the
    measured critical path (longest chain of dependent combines).
    """
    out = [np.array(e, dtype=float, copy=True) for e in elems]
    n = out[0].shape[0]
    depth = np.zeros(n, dtype=int)
    n_comb = 0
    for targets, partners in scan_schedule(n, reverse):
        def level(ix, targets=targets, partners=partners):
            tgt = tuple(e[targets[ix]] for e in out)
            par = tuple(e[partners[ix]] for e in out)
            return op(tgt, par) if reverse else op(par, tgt)

        new = _run_chunked(level, np.arange(targets.size), workers)
        for e, v in zip(out, new):
            e[targets] = v
        depth[targets] = np.maximum(depth[targets], depth[partners]) + 1
        n_comb += targets.size
    if stats is not None:
        stats["combines"] = n_comb
        stats["depth"] = int(depth.max(initial=0))
    return tuple(out)


# ---------------------------------------------------------------------------
# prefix-sum sampling


def _time_first(a: np.ndarray, core: int) -> np.ndarray:
    return np.moveaxis(a, a.ndim - core - 1, 0)


def _time_back(a: np.ndarray, core: int) -> np.ndarray:
    return np.moveaxis(a, 0, a.ndim - core - 1)


def _lift(a: np.ndarray, batch: tuple, core: int) -> np.ndarray:
    """Broadcast a time-first array ``(T, *b, *core)`` to ``(T, *batch, *core)``."""
    nb = a.ndim - 1 - core
    a = a.reshape(a.shape[:1] + (1,) * (len(batch) - nb) + a.shape[1:])
    return np.broadcast_to(a, a.shape[:1] + tuple(batch) + a.shape[a.ndim - core:])


def build_backward_elements(model: LGSSM, fr: FilterResult) -> AffineGaussElement:
    """Stacked elements ``x_t | x_{t+1}`` for ``t = 0..T-1`` (time on the leading axis)."""
    G, c, Lam = backward_conditionals(model, fr)
    return AffineGaussElement(_time_first(G, 2), _time_first(c, 1), _time_first(Lam, 2))


def realize_noise(elements: AffineGaussElement, rng: RngStream) -> AffineGaussElement:
    """Fold ``w_t ~ N(0, Lam_t)`` from substream ``("bs", t)`` into the offsets."""
    T = elements.c.shape[0]
    d = elements.c.shape[-1]
    batch = np.broadcast_shapes(elements.c.shape[1:-1], rng.batch_shape)
    xi = stream_normals(rng, "bs", np.arange(T), batch + (d,))
    chol = cholesky(_time_back(elements.Lam, 2), allow_singular=True)
    w = _time_first(_mv(chol, xi), 1)
    return AffineGaussElement(elements.G, _lift(elements.c, batch, 1) + w, np.zeros_like(elements.Lam))


def prefix_sample(
    model: LGSSM,
    fr: FilterResult,
    rng: RngStream,
    workers: int = 1,
    stats: Optional[dict] = None,
) -> Trajectory:
    """Posterior path draw via a reverse associative scan of realized backward elements.

    Consumes exactly the same substreams as :func:`lgssm.backward_sample`,
    so both return the same path up to floating-point reassociation.
    """
    x_T = sample_terminal(fr, rng)
    shape = _out_shape(fr, rng)
    x = np.empty(shape[:-1] + (model.T + 1,) + shape[-1:])
    x[..., -1, :] = x_T
    if model.T == 0:
        if stats is not None:
            stats.update(combines=0, depth=0)
        return x
    elems = realize_noise(build_backward_elements(model, fr), rng)
    G = _lift(elems.G, shape[:-1], 2)
    c = _lift(elems.c, shape[:-1], 1)
    SG, Sc = associative_scan(compose_affine, (G, c), reverse=True, workers=workers, stats=stats)
    x[..., :-1, :] = _time_back(_mv(SG, x_T) + Sc, 1)
    return x


# ---------------------------------------------------------------------------
# divide-and-conquer sampling


@dataclass(frozen=True)
class SegmentTree:
    """Balanced binary tree over the points ``0..T``.

    Node ``k`` spans ``[left[k], right[k]]``; internal nodes split at
    ``mid[k]`` into ``children[k]``. Leaves are unit segments ``[t, t+1]``.
    ``elements`` holds, per node, the composed backward law of
    ``x_left | x_right``.
    """

    left: np.ndarray
    right: np.ndarray
    mid: np.ndarray
    children: np.ndarray
    depth: np.ndarray
    height: np.ndarray
    elements: Optional[AffineGaussElement] = None

    @property
    def n_nodes(self) -> int:
        return self.left.size


@lru_cache(maxsize=None)
def tree_shape(T: int) -> SegmentTree:
    if T < 1:
        raise ValueError("segment tree needs T >= 1")
    left, right, mid, children, depth = [], [], [], [], []
    queue = [(0, T, 0)]
    while queue:  # breadth-first, so node ids follow levels
        nxt = []
        for lo, hi, dep in queue:
            k = len(left)
            left.append(lo)
            right.append(hi)
            depth.append(dep)
            if hi - lo >= 2:
                m = (lo + hi) // 2
                mid.append(m)
                children.append([-1, -1])
                nxt.append((lo, m, dep + 1, k, 0))
                nxt.append((m, hi, dep + 1, k, 1))
            else:
                mid.append(-1)
                children.append([-1, -1])
        queue = []
        for lo, hi, dep, parent, side in nxt:
            children[parent][side] = len(left) + len(queue)
            queue.append((lo, hi, dep))
    children = np.array(children, dtype=int)
    height = np.zeros(len(left), dtype=int)
    for k in range(len(left) - 1, -1, -1):
        if children[k, 0] >= 0:
            height[k] = max(height[children[k, 0]], height[children[k, 1]]) + 1
    return SegmentTree(
        np.array(left), np.array(right), np.array(mid), children, np.array(depth), height
    )


def build_segment_tree(model: LGSSM, fr: FilterResult, workers: int = 1) -> SegmentTree:
    """Compose backward elements bottom-up, one tree height per vectorised step."""
    shape = tree_shape(model.T)
    leaves = build_backward_elements(model, fr)
    n = shape.n_nodes
    fields = []
    for f in (leaves.G, leaves.c, leaves.Lam):
        arr = np.zeros((n,) + f.shape[1:])
        is_leaf = shape.height == 0
        arr[is_leaf] = f[shape.left[is_leaf]]
        fields.append(arr)
    for h in range(1, int(shape.height.max()) + 1):
        nodes = np.flatnonzero(shape.height == h)
        lc, rc = shape.children[nodes, 0], shape.children[nodes, 1]

        def level(ix, lc=lc, rc=rc):
            return compose_affine_gauss(
                tuple(f[lc[ix]] for f in fields), tuple(f[rc[ix]] for f in fields))

        new = _run_chunked(level, np.arange(nodes.size), workers)
        for f, v in zip(fields, new):
            f[nodes] = v
    return SegmentTree(
        shape.left, shape.right, shape.mid, shape.children, shape.depth, shape.height,
        AffineGaussElement(*fields),
    )


def _bridge(G1, c1, L1, G2, c2, L2, x_l, x_r):
    """Law of ``x_m`` given ``x_l = G1 x_m + c1 + N(0, L1)`` and ``x_m = G2 x_r + c2 + N(0, L2)``."""
    mu = _mv(G2, x_r) + c2
    S = symmetrize(G1 @ L2 @ _mT(G1) + L1)
    K = _mT(psd_solve(S, G1 @ L2))
    mean = mu + _mv(K, x_l - _mv(G1, mu) - c1)
    cov = symmetrize(L2 - K @ G1 @ L2)
    return mean, cov


def dnc_sample(
    model: LGSSM,
    fr: FilterResult,
    rng: RngStream,
    workers: int = 1,
    tree: Optional[SegmentTree] = None,
) -> Trajectory:
    """Posterior path draw by divide and conquer over a balanced segment tree.

    ``x_T`` comes from substream ``bsT`` and ``x_0 | x_T`` from the root
    element with substream ``("bs", 0)`` (so ``T = 1`` reproduces the
    sequential draw). Every remaining point is the midpoint of a node
    whose endpoints are already sampled and is drawn from the Gaussian
    bridge between them, using substream ``("dnc", node id)``. All
    midpoints at one tree depth are drawn together.
    """
    shape = _out_shape(fr, rng)
    d = shape[-1]
    x = np.empty(shape[:-1] + (model.T + 1, d))
    x[..., -1, :] = sample_terminal(fr, rng)
    if model.T == 0:
        return x
    tree = build_segment_tree(model, fr, workers) if tree is None else tree
    E = tree.elements
    batch = shape[:-1]

    def field_at(f, nodes, core):
        # node axis first -> (..., n, core dims)
        return _time_back(_lift(f[nodes], batch, core), core)

    G0, c0, L0 = E.G[0], E.c[0], E.Lam[0]
    xi0 = rng.child("bs", 0).normal_like(shape)
    x[..., 0, :] = _mv(G0, x[..., -1, :]) + c0 + _mv(cholesky(L0, allow_singular=True), xi0)

    for dep in range(int(tree.depth.max()) + 1):
        nodes = np.flatnonzero((tree.depth == dep) & (tree.mid >= 0))
        if nodes.size == 0:
            continue
        xi = stream_normals(rng, "dnc", nodes, shape)

        def level(ix, nodes=nodes, xi=xi):
            sub = nodes[ix]
            lc, rc = tree.children[sub, 0], tree.children[sub, 1]
            mean, cov = _bridge(
                field_at(E.G, lc, 2), field_at(E.c, lc, 1), field_at(E.Lam, lc, 2),
                field_at(E.G, rc, 2), field_at(E.c, rc, 1), field_at(E.Lam, rc, 2),
                x[..., tree.left[sub], :], x[..., tree.right[sub], :],
            )
            draw = mean + _mv(cholesky(cov, allow_singular=True), xi[..., ix, :])
            return (_time_first(draw, 1),)

        (draw,) = _run_chunked(level, np.arange(nodes.size), workers)
        x[..., tree.mid[nodes], :] = _time_back(draw, 1)
    return x


# ---------------------------------------------------------------------------
# parallel filtering


def _filter_elements(model: LGSSM, obs: np.ndarray) -> tuple:
    T, dx = model.T, model.dx
    batch = np.broadcast_shapes(model.batch_shape, obs.shape[:-2])
    F = np.concatenate([np.zeros(batch + (1, dx, dx)), np.broadcast_to(model.F, batch + model.F.shape[-3:])], -3)
    bias = np.concatenate([np.broadcast_to(model.m0, batch + (dx,))[..., None, :],
                           np.broadcast_to(model.b, batch + model.b.shape[-2:])], -2)
    Q = np.concatenate([np.broadcast_to(model.P0, batch + (dx, dx))[..., None, :, :],
                        np.broadcast_to(model.Q, batch + model.Q.shape[-3:])], -3)
    H, c, R = model.H, model.c, model.R
    S = symmetrize(H @ Q @ _mT(H) + R)
    HQ = H @ Q
    Kt = psd_solve(S, HQ)
    K = _mT(Kt)
    resid = obs - _mv(H, bias) - c
    HF = H @ F
    SinvHF = psd_solve(S, HF)
    A_obs = F - K @ HF
    b_obs = bias + _mv(K, resid)
    C_obs = symmetrize(Q - K @ HQ)
    eta_obs = _mv(_mT(SinvHF), resid)
    J_obs = symmetrize(_mT(HF) @ SinvHF)
    on = model.mask.reshape((T + 1,) + (1,) * 2)
    on1 = model.mask.reshape((T + 1, 1))
    return (
        np.where(on, A_obs, F),
        np.where(on1, b_obs, bias),
        np.where(on, C_obs, Q),
        np.where(on1, eta_obs, 0.0),
        np.where(on, J_obs, 0.0),
    )


def parallel_filter(model: LGSSM, obs: np.ndarray, workers: int = 1, stats: Optional[dict] = None) -> FilterResult:
    """Kalman filter as a forward associative scan over five-component elements."""
    obs = np.asarray(obs, dtype=float)
    A, b, C, eta, J = _filter_elements(model, obs)
    cores = (2, 1, 2, 1, 2)
    elems = tuple(_time_first(e, k) for e, k in zip((A, b, C, eta, J), cores))
    out = associative_scan(combine_filter, elems, reverse=False, workers=workers, stats=stats)
    fm = _time_back(out[1], 1)
    fP = symmetrize(_time_back(out[2], 2))
    batch = fm.shape[:-2]
    dx = model.dx
    m0 = np.broadcast_to(model.m0, batch + (dx,))[..., None, :]
    P0 = np.broadcast_to(model.P0, batch + (dx, dx))[..., None, :, :]
    F = model.F
    pm = np.concatenate([m0, _mv(F, fm[..., :-1, :]) + model.b], -2)
    pP = np.concatenate([P0, symmetrize(F @ fP[..., :-1, :, :] @ _mT(F) + model.Q)], -3)
    idx = np.flatnonzero(model.mask)
    H, c, R = model.H[..., idx, :, :], model.c[..., idx, :], model.R[..., idx, :, :]
    if idx.size:
        ll = mvn_logpdf(obs[..., idx, :], _mv(H, pm[..., idx, :]) + c,
                        H @ pP[..., idx, :, :] @ _mT(H) + R).sum(-1)
    else:
        ll = np.zeros(batch)
    return FilterResult(GaussParams(pm, pP), GaussParams(fm, fP), ll)


# ---------------------------------------------------------------------------
# exact-law extraction


class _TapeStream:
    """Stand-in for :class:`RngStream` that replays prescribed standard normals."""

    def __init__(self, tape: "_NoiseTape", path: tuple, index=None):
        self.tape = tape
        self.path = path
        self.index = index  # array of indices for a batched child
        self.key = np.zeros(()) if index is None else np.zeros(np.shape(index[1]))

    @property
    def batch_shape(self) -> tuple:
        return self.key.shape

    def child(self, label, index=0) -> "_TapeStream":
        if self.index is not None:
            raise NotImplementedError("nested batched children")
        if np.ndim(index) == 0:
            return _TapeStream(self.tape, self.path + ((label, int(index)),))
        return _TapeStream(self.tape, self.path, (label, np.asarray(index)))

    def normal(self, shape=()) -> np.ndarray:
        shape = (int(shape),) if np.ndim(shape) == 0 and shape != () else tuple(shape)
        if self.index is None:
            return self.tape.fetch(self.path, shape)
        label, idx = self.index
        return np.stack([self.tape.fetch(self.path + ((label, int(i)),), shape) for i in idx.ravel()]
                        ).reshape(idx.shape + shape)

    def normal_like(self, shape) -> np.ndarray:
        return self.normal(tuple(shape)[self.key.ndim:])


class _NoiseTape:
    def __init__(self):
        self.slots: dict = {}
        self.size = 0
        self.vector: Optional[np.ndarray] = None

    def fetch(self, path: tuple, shape: tuple) -> np.ndarray:
        n = int(np.prod(shape, dtype=int))
        if self.vector is None:
            if path in self.slots:
                raise RuntimeError(f"substream {path} consumed twice")
            self.slots[path] = (self.size, shape)
            self.size += n
            return np.zeros(shape)
        start, want = self.slots[path]
        if want != shape:
            raise RuntimeError(f"substream {path} requested with a different shape")
        return self.vector[start:start + n].reshape(shape)


_SAMPLERS = {
    "sequential": backward_sample,
    "prefix": prefix_sample,
    "dnc": dnc_sample,
}


def extract_affine_law(
    sampler: Union[str, Callable],
    model: LGSSM,
    fr: FilterResult,
    cap: int = DENSE_CAP,
) -> GaussParams:
    """Exact law of a pathwise sampler's output over stacked ``x_{0:T}``.

    Each sampler is an affine function of the standard normals it
    consumes, so pushing the zero vector and every basis vector through
    it recovers the mean and the full covariance without Monte Carlo.
    """
    fn = _SAMPLERS[sampler] if isinstance(sampler, str) else sampler
    if model.batch_shape:
        raise ValueError("extract_affine_law takes a single (unbatched) model")
    n = (model.T + 1) * model.dx
    if n > cap:
        raise ValueError(f"law size {n} exceeds cap {cap}")
    tape = _NoiseTape()
    base = np.asarray(fn(model, fr, _TapeStream(tape, ()))).reshape(-1)
    tape.vector = np.zeros(tape.size)
    cols = np.empty((n, tape.size))
    for k in range(tape.size):
        tape.vector[:] = 0.0
        tape.vector[k] = 1.0
        cols[:, k] = np.asarray(fn(model, fr, _TapeStream(tape, ()))).reshape(-1) - base
    return GaussParams(base, cols @ cols.T)
