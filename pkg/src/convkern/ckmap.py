"""Exact multi-layer convolutional kernels via cross-covariance propagation.

For two signals x, y the state at every stage is the dense map
``S[u, v] = <phi(x)[u], phi(y)[v]>`` over pairs of positions.  Maps are held in
batches of shape ``(B,) + extents + extents`` and every stage is a sequence of
gathers and elementwise operations applied in a fixed order, so an entry never
depends on how pairs were grouped into batches or threads.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dpk
from .domain import (Grid, PatchShape, PoolingFilter, Signal, filter_from_dict,
                     gather, pool_axis, pool_index, shift_index)

# pairs per chunk are chosen so one map array holds about this many doubles
CHUNK_ELEMENTS = 1 << 21


class NumericalError(ArithmeticError):
    def __init__(self, layer: int, stage: str):
        super().__init__(f"non-finite values after {stage} stage of layer {layer}")
        self.layer = layer
        self.stage = stage


class CacheMismatchError(ValueError):
    pass


class _Stats:
    """Process-wide counters, used to check caching and resume behaviour."""

    def __init__(self):
        self._lock = threading.Lock()
        self.self_maps = 0
        self.kernel_evals = 0

    def add(self, self_maps: int = 0, kernel_evals: int = 0):
        with self._lock:
            self.self_maps += self_maps
            self.kernel_evals += kernel_evals

    def reset(self):
        with self._lock:
            self.self_maps = 0
            self.kernel_evals = 0

    def snapshot(self) -> dict:
        with self._lock:
            return {"self_maps": self.self_maps, "kernel_evals": self.kernel_evals}


STATS = _Stats()


@dataclass(frozen=True)
class LayerSpec:
    patch: PatchShape
    kernel: dpk.DotProductKernel
    pooling: PoolingFilter
    homogeneous: bool = True

    def to_dict(self) -> dict:
        return {"patch": self.patch.to_list(), "kernel": self.kernel.to_dict(),
                "pooling": self.pooling.to_dict(), "homogeneous": self.homogeneous}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(PatchShape(tuple(d["patch"])), dpk.DotProductKernel.from_dict(d["kernel"]),
                   filter_from_dict(d["pooling"]), bool(d.get("homogeneous", True)))


@dataclass(frozen=True)
class _LayerPlan:
    grid: Grid                     # grid seen by patch extraction and kernel map
    out_grid: Grid                 # grid after pooling
    patch_index: tuple             # per offset, per axis index arrays
    pool_index: tuple              # per axis (taps, n_out) index arrays
    trace_weights: np.ndarray      # flattened A^T A: trace of the pooled map as one weighted sum


def _trace_weights(g: Grid, qidx: tuple, h: PoolingFilter) -> np.ndarray:
    """C = A^T A flattened, so that trace(A S A^T) = sum(C * S)."""
    C = np.ones((1, 1))
    for n, idx in zip(g.extents, qidx):
        A = np.zeros((idx.shape[1], n + 1))
        for w, row in zip(h.axis_taps, idx):
            np.add.at(A, (np.arange(idx.shape[1]), row), w)
        A = A[:, :n]        # sentinel column reads the zero padding
        Ca = A.T @ A
        m = C.shape[0]
        C = np.einsum("ac,bd->abcd", C, Ca).reshape(m * n, m * n)
    C = np.ascontiguousarray(C.ravel())
    C.setflags(write=False)
    return C


@dataclass(frozen=True, eq=False)
class ArchSpec:
    """Input grid, channel count and the ordered layers."""

    grid: Grid
    channels: int
    layers: tuple[LayerSpec, ...]
    _plans: tuple = field(default=(), init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("architecture needs at least one layer")
        if self.channels < 1:
            raise ValueError("channel count must be positive")
        object.__setattr__(self, "layers", layers)
        plans = []
        g = self.grid
        for i, layer in enumerate(layers):
            if layer.patch.rank != g.rank:
                raise ValueError(f"layer {i}: patch rank {layer.patch.rank} on grid rank {g.rank}")
            if layer.pooling.rank != g.rank:
                raise ValueError(f"layer {i}: pooling rank {layer.pooling.rank} on grid rank {g.rank}")
            try:
                out = g.downsampled(layer.pooling.stride)
            except ValueError as e:
                raise ValueError(f"layer {i}: {e}") from None
            pidx = tuple(tuple(shift_index(n, o, g.boundary) for n, o in zip(g.extents, off))
                         for off in layer.patch.offsets)
            qidx = tuple(pool_index(n, layer.pooling, g.boundary) for n in g.extents)
            plans.append(_LayerPlan(g, out, pidx, qidx, _trace_weights(g, qidx, layer.pooling)))
            g = out
        object.__setattr__(self, "_plans", tuple(plans))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_grid(self) -> Grid:
        return self._plans[-1].out_grid

    def layer_grid(self, i: int) -> Grid:
        return self._plans[i].grid

    @property
    def max_map_size(self) -> int:
        return max(p.grid.size ** 2 for p in self._plans)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "channels": self.channels,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        g = d["grid"]
        return cls(Grid(tuple(g["extents"]), g.get("boundary", "periodic")), int(d["channels"]),
                   tuple(LayerSpec.from_dict(x) for x in d["layers"]))

    @property
    def fingerprint(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return int.from_bytes(hashlib.blake2b(blob.encode(), digest_size=8).digest(), "little")

    def check_signal(self, x: Signal):
        if x.grid.extents != self.grid.extents or x.grid.boundary != self.grid.boundary:
            raise ValueError(f"signal grid {x.grid} does not match architecture grid {self.grid}")
        if x.channels != self.channels:
            raise ValueError(f"signal has {x.channels} channels, architecture expects {self.channels}")


@dataclass(frozen=True, eq=False)
class CrossCovMap:
    grid: Grid
    values: np.ndarray   # (|Omega|, |Omega|)

    def trace(self) -> float:
        return float(_trace(self.values.reshape((1,) + self.values.shape))[0])


@dataclass(frozen=True, eq=False)
class SelfCache:
    """Per-layer position norms of one signal, plus K(x, x)."""

    fingerprint: int
    norms: tuple[np.ndarray, ...]
    value: float
    digest: bytes


@dataclass(frozen=True, eq=False)
class SelfCacheBatch:
    """Self caches for many signals, stacked along the first axis."""

    fingerprint: int
    norms: tuple[np.ndarray, ...]   # layer l: (n, |Omega_l|)
    values: np.ndarray              # (n,)
    digests: tuple[bytes, ...]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> SelfCache:
        return SelfCache(self.fingerprint, tuple(nm[i] for nm in self.norms),
                         float(self.values[i]), self.digests[i])

    @classmethod
    def stack(cls, caches: Sequence[SelfCache]) -> "SelfCacheBatch":
        fps = {c.fingerprint for c in caches}
        if len(fps) != 1:
            raise CacheMismatchError("caches come from different architectures")
        depth = len(caches[0].norms)
        return cls(fps.pop(), tuple(np.stack([c.norms[l] for c in caches]) for l in range(depth)),
                   np.array([c.value for c in caches]), tuple(c.digest for c in caches))


def signal_digest(values: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(values, dtype=np.float64).tobytes(),
                           digest_size=16).digest()


# -- stages ---------------------------------------------------------------

def _layer0(X: np.ndarray, Y: np.ndarray, grid: Grid) -> np.ndarray:
    """S[u, v] = <x[u], y[v]>, channels summed in order."""
    S = X[:, :, None, 0] * Y[:, None, :, 0]
    for c in range(1, X.shape[2]):
        S += X[:, :, None, c] * Y[:, None, :, c]
    return S.reshape((X.shape[0],) + grid.extents + grid.extents)


def _patch_stage(S: np.ndarray, plan: _LayerPlan) -> np.ndarray:
    r = plan.grid.rank
    bd = plan.grid.boundary
    out = None
    for idx in plan.patch_index:
        T = S
        for a in range(r):
            T = gather(T, 1 + a, idx[a], bd)
            T = gather(T, 1 + r + a, idx[a], bd)
        if out is None:
            out = np.array(T, copy=True)
        else:
            out += T
    return out


def _diag(S: np.ndarray, n: int) -> np.ndarray:
    return np.diagonal(S.reshape(S.shape[0], n, n), axis1=1, axis2=2).copy()


def _norms(S: np.ndarray, n: int) -> np.ndarray:
    return np.sqrt(np.maximum(_diag(S, n), 0.0))


def _kernel_stage(S: np.ndarray, layer: LayerSpec, nx, ny, n: int) -> np.ndarray:
    k = layer.kernel
    if not layer.homogeneous:
        # kernels defined only on [-1, 1] see raw inner products here
        return np.ascontiguousarray(k(dpk.check_cosine(S)) if k.bounded_domain else k(S))
    shape = S.shape
    S2 = S.reshape(shape[0], n, n)
    denom = nx[:, :, None] * ny[:, None, :]
    pos = denom > 0
    cos = np.zeros_like(S2)
    np.divide(S2, denom, out=cos, where=pos)
    out = denom * k(dpk.check_cosine(cos))
    out[~pos] = 0.0
    return out.reshape(shape)


def _pool_stage(S: np.ndarray, plan: _LayerPlan, h: PoolingFilter) -> np.ndarray:
    r = plan.grid.rank
    bd = plan.grid.boundary
    for a in range(r):
        S = pool_axis(S, 1 + a, h, plan.pool_index[a], bd)
    for a in range(r):
        S = pool_axis(S, 1 + r + a, h, plan.pool_index[a], bd)
    return S


def _trace(S: np.ndarray) -> np.ndarray:
    """Sequential sum of the diagonal, one value per batch entry."""
    n = int(round(np.sqrt(S[0].size)))
    d = _diag(S, n)
    acc = d[:, 0].copy()
    for u in range(1, n):
        acc += d[:, u]
    return acc


def _check(S: np.ndarray, layer: int, stage: str):
    if not np.all(np.isfinite(S)):
        raise NumericalError(layer, stage)


def _weighted_trace(S: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.sum(S.reshape(S.shape[0], -1) * C, axis=1)


def _propagate(arch: ArchSpec, X: np.ndarray, Y: np.ndarray, norms_x, norms_y,
               collect_norms: bool = False, final_trace: bool = False):
    """Run all layers on a batch.

    ``norms_x``/``norms_y`` give per-layer position norms (lists of (B, n_l)
    arrays); when ``collect_norms`` is set the batch is a self batch (X is Y)
    and norms are read off the map as it is propagated.  With ``final_trace``
    the last pooling is folded into the trace and a (B,) vector is returned.
    """
    S = _layer0(X, Y, arch.grid)
    collected = []
    for l, (layer, plan) in enumerate(zip(arch.layers, arch._plans)):
        n = plan.grid.size
        S = _patch_stage(S, plan)
        _check(S, l, "patch")
        if collect_norms:
            nx = ny = _norms(S, n)
            collected.append(nx)
        else:
            nx, ny = norms_x[l], norms_y[l]
        S = _kernel_stage(S, layer, nx, ny, n)
        _check(S, l, "kernel")
        if final_trace and l == arch.depth - 1:
            return _weighted_trace(S, plan.trace_weights), collected
        S = _pool_stage(S, plan, layer.pooling)
        _check(S, l, "pooling")
    return S, collected


def _stack_values(arch: ArchSpec, signals: Sequence[Signal]) -> np.ndarray:
    for x in signals:
        arch.check_signal(x)
    return np.stack([x.values for x in signals])


def _chunk(arch: ArchSpec) -> int:
    return max(1, CHUNK_ELEMENTS // arch.max_map_size)


# -- public API ---------------------------------------------------------------

def self_caches(arch: ArchSpec, X: np.ndarray | Sequence[Signal]) -> SelfCacheBatch:
    """Self caches for a stack of signal values of shape (n, |Omega|, p)."""
    if not isinstance(X, np.ndarray):
        X = _stack_values(arch, X)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (arch.grid.size, arch.channels):
        raise ValueError(f"values of shape {X.shape} do not fit the architecture input")
    norms = [[] for _ in arch.layers]
    vals = []
    step = _chunk(arch)
    for a in range(0, X.shape[0], step):
        Xb = X[a:a + step]
        v, nm = _propagate(arch, Xb, Xb, None, None, collect_norms=True, final_trace=True)
        for l in range(arch.depth):
            norms[l].append(nm[l])
        vals.append(v)
    STATS.add(self_maps=X.shape[0])
    n = X.shape[0]
    norms = tuple(np.concatenate(nm) if nm else np.zeros((0, arch.layer_grid(l).size))
                  for l, nm in enumerate(norms))
    values = np.concatenate(vals) if vals else np.zeros(0)
    return SelfCacheBatch(arch.fingerprint, norms, values,
                          tuple(signal_digest(X[i]) for i in range(n)))


def self_cache(arch: ArchSpec, x: Signal) -> SelfCache:
    arch.check_signal(x)
    return self_caches(arch, x.values[None])[0]


def kernel_pairs(arch: ArchSpec, X: np.ndarray, cx: SelfCacheBatch, Y: np.ndarray,
                 cy: SelfCacheBatch, i_idx: np.ndarray, j_idx: np.ndarray) -> np.ndarray:
    """K(X[i_idx[m]], Y[j_idx[m]]) for every m, using precomputed self caches.

    Each pair is oriented by signal digest before propagation so that the
    result is bitwise symmetric in its arguments.
    """
    fp = arch.fingerprint
    if cx.fingerprint != fp or cy.fingerprint != fp:
        raise CacheMismatchError("self cache was built for a different architecture")
    i_idx = np.asarray(i_idx, dtype=np.int64)
    j_idx = np.asarray(j_idx, dtype=np.int64)
    m = i_idx.shape[0]
    out = np.empty(m)
    if m == 0:
        return out
    swap = np.array([cx.digests[i] > cy.digests[j] for i, j in zip(i_idx, j_idx)], dtype=bool)
    step = _chunk(arch)
    for a in range(0, m, step):
        sl = slice(a, a + step)
        ii, jj, sw = i_idx[sl], j_idx[sl], swap[sl]
        A = np.where(sw[:, None, None], Y[jj], X[ii])
        B = np.where(sw[:, None, None], X[ii], Y[jj])
        na = [np.where(sw[:, None], ny[jj], nx[ii]) for nx, ny in zip(cx.norms, cy.norms)]
        nb = [np.where(sw[:, None], nx[ii], ny[jj]) for nx, ny in zip(cx.norms, cy.norms)]
        out[sl], _ = _propagate(arch, A, B, na, nb, final_trace=True)
    STATS.add(kernel_evals=m)
    return out


def kernel_eval_with_selfcache(arch: ArchSpec, x: Signal, y: Signal,
                               cache_x: SelfCache, cache_y: SelfCache) -> float:
    arch.check_signal(x)
    arch.check_signal(y)
    for c in (cache_x, cache_y):
        if c.fingerprint != arch.fingerprint:
            raise CacheMismatchError("self cache was built for a different architecture")
    cx = SelfCacheBatch.stack([cache_x])
    cy = SelfCacheBatch.stack([cache_y])
    return float(kernel_pairs(arch, x.values[None], cx, y.values[None], cy,
                              np.zeros(1, np.int64), np.zeros(1, np.int64))[0])


def kernel_eval(arch: ArchSpec, x: Signal, y: Signal) -> float:
    """K_L(x, y): trace of the final cross map.

    The last pooling is folded into the trace (``sum_ab C[a, b] S[a, b]`` with
    ``C = A^T A``), which agrees with ``propagate_pair(...)[0].trace()`` up to
    rounding.
    """
    return kernel_eval_with_selfcache(arch, x, y, self_cache(arch, x), self_cache(arch, y))


def propagate_pair(arch: ArchSpec, x: Signal, y: Signal
                   ) -> tuple[CrossCovMap, CrossCovMap, CrossCovMap]:
    """Final-layer maps (S_xy, S_xx, S_yy)."""
    arch.check_signal(x)
    arch.check_signal(y)
    X = x.values[None]
    Y = y.values[None]
    Sxx, nx = _propagate(arch, X, X, None, None, collect_norms=True)
    Syy, ny = _propagate(arch, Y, Y, None, None, collect_norms=True)
    Sxy, _ = _propagate(arch, X, Y, nx, ny)
    n = arch.out_grid.size
    return tuple(CrossCovMap(arch.out_grid, S.reshape(n, n)) for S in (Sxy, Sxx, Syy))


def gram_matrix(arch: ArchSpec, signals: Sequence[Signal] | np.ndarray) -> np.ndarray:
    """Small dense Gram matrix; see ``gram.compute_gram`` for the tiled version."""
    X = signals if isinstance(signals, np.ndarray) else _stack_values(arch, signals)
    X = np.ascontiguousarray(X, dtype=np.float64)
    c = self_caches(arch, X)
    n = X.shape[0]
    iu, ju = np.triu_indices(n)
    vals = kernel_pairs(arch, X, c, X, c, iu, ju)
    K = np.empty((n, n))
    K[iu, ju] = vals
    K[ju, iu] = vals
    return K


def cross_matrix(arch: ArchSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    cx = self_caches(arch, X)
    cy = self_caches(arch, Y)
    ii, jj = np.meshgrid(np.arange(X.shape[0]), np.arange(Y.shape[0]), indexing="ij")
    vals = kernel_pairs(arch, X, cx, Y, cy, ii.ravel(), jj.ravel())
    return vals.reshape(X.shape[0], Y.shape[0])
