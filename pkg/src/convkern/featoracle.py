"""Explicit feature maps for polynomial architectures and operator algebra.

Feature vectors are laid out with positions outermost and, within a position,
tensor indices row-major (for a degree-2 layer on patch vectors of length D the
entry ``(i, j)`` of ``z (x) z`` sits at ``i * D + j``).  Custom polynomial
kernels concatenate ``sqrt(b_j) z^(x)j`` over increasing ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ckmap import ArchSpec
from .domain import PERIODIC, PoolingFilter, Signal, dft, gather, idft, pool_axis

DEFAULT_DIM_CAP = 2_000_000
SVD_CUTOFF = 1e-10
INFEASIBLE_TOL = 1e-8
RANGE_TOL = 1e-6
SPAN_CAP = 200_000_000


class FeatureDimensionError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ExplicitFeatures:
    dim: int
    vector: np.ndarray
    shape: tuple[int, ...]     # (|Omega_L|, D_L)


def _layer_terms(arch: ArchSpec, l: int) -> list[tuple[int, float]]:
    layer = arch.layers[l]
    k = layer.kernel
    if not k.is_polynomial:
        raise ValueError(f"layer {l}: {k.kind} kernel has no finite feature map")
    terms = k.poly_terms()
    if layer.homogeneous and terms != [(1, 1.0)]:
        raise ValueError(f"layer {l}: homogeneous lift of a nonlinear kernel is not polynomial")
    return terms


def feature_dims(arch: ArchSpec) -> list[int]:
    """Per-position feature dimension after each layer."""
    dims = []
    D = arch.channels
    for l, layer in enumerate(arch.layers):
        Dp = D * len(layer.patch)
        D = sum(Dp ** j for j, _ in _layer_terms(arch, l))
        dims.append(D)
    return dims


def check_dims(arch: ArchSpec, cap: int = DEFAULT_DIM_CAP) -> int:
    """Total flattened feature dimension, raising if any stage exceeds ``cap``."""
    D = arch.channels
    for l, layer in enumerate(arch.layers):
        n = arch.layer_grid(l).size
        Dp = D * len(layer.patch)
        D = sum(Dp ** j for j, _ in _layer_terms(arch, l))
        if n * D > cap:
            raise FeatureDimensionError(
                f"layer {l} feature dimension {n * D} exceeds cap {cap}")
    return arch.out_grid.size * D


def _tensor_power(Z: np.ndarray, j: int) -> np.ndarray:
    lead = Z.shape[:-1]
    if j == 0:
        return np.ones(lead + (1,))
    T = Z
    for _ in range(j - 1):
        T = (T[..., :, None] * Z[..., None, :]).reshape(lead + (-1,))
    return T


def features_batch(arch: ArchSpec, X: np.ndarray, cap: int = DEFAULT_DIM_CAP) -> np.ndarray:
    """Flattened feature vectors for a stack of inputs of shape (m, |Omega|, p)."""
    check_dims(arch, cap)
    F = np.asarray(X, dtype=np.float64)
    m = F.shape[0]
    for l, layer in enumerate(arch.layers):
        g = arch.layer_grid(l)
        G = F.reshape((m,) + g.extents + (F.shape[-1],))
        blocks = []
        for idx in arch._plans[l].patch_index:
            b = G
            for a in range(g.rank):
                b = gather(b, 1 + a, idx[a], g.boundary)
            blocks.append(b)
        Z = np.concatenate(blocks, axis=-1)
        parts = [np.sqrt(c) * _tensor_power(Z, j) for j, c in _layer_terms(arch, l)]
        Z = np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
        for a in range(g.rank):
            Z = pool_axis(Z, 1 + a, layer.pooling, arch._plans[l].pool_index[a], g.boundary)
        F = Z.reshape(m, -1, Z.shape[-1])
    return F.reshape(m, -1)


def build_features(arch: ArchSpec, x: Signal, cap: int = DEFAULT_DIM_CAP) -> ExplicitFeatures:
    arch.check_signal(x)
    v = features_batch(arch, x.values[None], cap)[0]
    return ExplicitFeatures(v.shape[0], v, (arch.out_grid.size, v.shape[0] // arch.out_grid.size))


@dataclass(frozen=True, eq=False)
class MinNormResult:
    norm: float
    witness: np.ndarray
    residual: float


def _min_norm_solve(Phi: np.ndarray, f: np.ndarray) -> MinNormResult:
    W, *_ = np.linalg.lstsq(Phi, f, rcond=SVD_CUTOFF)
    res = float(np.linalg.norm(Phi @ W - f))
    scale = max(1.0, float(np.linalg.norm(f)))
    if res > INFEASIBLE_TOL * scale:
        raise InfeasibleError(f"constraints inconsistent: residual {res:.3e}")
    return MinNormResult(float(np.linalg.norm(W)), W, res / scale)


def min_norm(arch: ArchSpec, signals: Sequence[Signal] | np.ndarray, targets,
             cap: int = DEFAULT_DIM_CAP) -> MinNormResult:
    """Smallest ||W|| with <W, Psi(x_i)> = f_i for every constraint."""
    X = signals if isinstance(signals, np.ndarray) else np.stack([s.values for s in signals])
    Phi = features_batch(arch, X, cap)
    return _min_norm_solve(Phi, np.asarray(targets, dtype=np.float64))


def spanning_sample(arch: ArchSpec, m: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, arch.grid.size, arch.channels))


def min_norm_functional(arch: ArchSpec, V: np.ndarray, sample: np.ndarray | None = None,
                        seed: int = 0, cap: int = DEFAULT_DIM_CAP) -> MinNormResult:
    """RKHS norm of the function x -> <V, Psi(x)>.

    Constraints are imposed on a random spanning sample of three times the
    feature dimension; the witness is the projection of V onto the span of the
    sampled feature vectors.
    """
    dim = check_dims(arch, cap)
    if sample is None and 3 * dim * dim > SPAN_CAP:
        raise FeatureDimensionError(f"spanning sample for dimension {dim} exceeds {SPAN_CAP} entries")
    if sample is None:
        sample = spanning_sample(arch, 3 * dim, seed)
    Phi = features_batch(arch, sample, cap)
    return _min_norm_solve(Phi, Phi @ np.asarray(V, dtype=np.float64))


def svd_pinv(M: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse, singular values below 1e-10 sigma_max dropped."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > SVD_CUTOFF * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


@dataclass(frozen=True, eq=False)
class PoolingOperatorMatrix:
    """Dense matrix of ``A x[u] = sum_t h[t] x[s u - t]`` on a cyclic grid of N points."""

    matrix: np.ndarray
    filt: PoolingFilter
    n: int

    @property
    def adjoint(self) -> np.ndarray:
        return self.matrix.T

    def pinv(self) -> np.ndarray:
        return svd_pinv(self.matrix)

    def spectrum(self) -> np.ndarray:
        return dft(self.filt.on_grid(self.n))

    def inverse_dft(self) -> np.ndarray:
        """A^{-1} = F^{-1} diag(F h)^{-1} F; only for stride 1 and a non-vanishing spectrum."""
        if self.filt.stride != 1:
            raise ValueError("DFT inverse needs stride 1")
        hh = self.spectrum()
        if np.min(np.abs(hh)) <= SVD_CUTOFF * np.max(np.abs(hh)):
            raise ValueError("filter spectrum vanishes; use the SVD pseudo-inverse")
        E = np.eye(self.n)
        return np.real(idft(dft(E, axes=(0,)) / hh[:, None], axes=(0,)))

    @property
    def invertible(self) -> bool:
        if self.filt.stride != 1:
            return False
        hh = np.abs(self.spectrum())
        return bool(np.min(hh) > SVD_CUTOFF * np.max(hh))


def pooling_operator(h: PoolingFilter, n: int) -> PoolingOperatorMatrix:
    if h.rank != 1:
        raise ValueError("operator matrices are built for 1-D filters")
    if n % h.stride:
        raise ValueError(f"stride {h.stride} does not divide {n}")
    A = np.zeros((n // h.stride, n))
    for u in range(n // h.stride):
        for t, w in zip(h.axis_offsets, h.axis_taps):
            A[u, (h.stride * u - t) % n] += w
    return PoolingOperatorMatrix(A, h, n)


def shifted_pooling(h1: PoolingFilter, p: int, n: int) -> np.ndarray:
    """B_p[w, a] = h1[w + p - a]: maps x to the pooled signal read at w + p."""
    return np.roll(pooling_operator(h1, n).matrix, -p, axis=0)


def e_pq_apply(h1: PoolingFilter, p: int, q: int, x) -> np.ndarray:
    """out[a, b] = sum_w h1[w + p - a] h1[w + q - b] x[w] on a cyclic grid.

    Adjoint of the tensor map M -> (M[w + p, w + q] of the pooled pair) applied
    to the diagonal embedding of x.
    """
    xv = x.values[:, 0] if isinstance(x, Signal) else np.asarray(x, dtype=np.float64)
    if isinstance(x, Signal) and (x.grid.rank != 1 or x.channels != 1 or x.grid.boundary != PERIODIC):
        raise ValueError("e_pq_apply needs a single-channel periodic 1-D signal")
    if h1.stride != 1:
        raise ValueError("e_pq_apply is defined for stride-1 filters")
    n = xv.shape[0]
    Bp = shifted_pooling(h1, p, n)
    Bq = shifted_pooling(h1, q, n)
    return Bp.T @ (xv[:, None] * Bq)


def _channel_map(fn, G: np.ndarray) -> np.ndarray:
    """Apply a map on (N, N) or (N,) slices to every trailing channel pair."""
    if G.ndim <= 2:
        return fn(G)
    lead = G.shape[:2] if G.ndim == 4 else G.shape[:1]
    rest = G.shape[len(lead):]
    out = None
    for idx in np.ndindex(*rest):
        r = fn(G[(Ellipsis,) + idx])
        if out is None:
            out = np.zeros(r.shape + rest)
        out[(Ellipsis,) + idx] = r
    return out


def prop2_forward(F: Mapping[tuple[int, int], np.ndarray], h1: PoolingFilter,
                  h2: PoolingFilter) -> dict[tuple[int, int], np.ndarray]:
    """G_pq = B_p^T diag(A2^T F_pq) B_q for each offset pair.

    ``F[p, q]`` has shape (N,) or (N, D, D); the function it encodes is
    ``f(x) = sum_pq sum_ab G_pq[a, b] x[a] x[b]`` (channel-contracted).
    """
    out = {}
    for (p, q), Fpq in F.items():
        Fpq = np.asarray(Fpq, dtype=np.float64)
        n = Fpq.shape[0]
        A2 = pooling_operator(h2, n).matrix
        Bp, Bq = shifted_pooling(h1, p, n), shifted_pooling(h1, q, n)
        out[(p, q)] = _channel_map(lambda v: Bp.T @ ((A2.T @ v)[:, None] * Bq), Fpq)
    return out


@dataclass(frozen=True, eq=False)
class PenaltyResult:
    value: float
    residual: float


def _range_basis(Bp: np.ndarray, Bq: np.ndarray) -> np.ndarray:
    n = Bp.shape[0]
    return np.stack([np.outer(Bp[w], Bq[w]).ravel() for w in range(n)], axis=1)


def prop2_penalty(G: Mapping[tuple[int, int], np.ndarray], h1: PoolingFilter,
                  h2: PoolingFilter) -> PenaltyResult:
    """sum_pq || pinv(A2)^T diag(pinv(B_p)^T G_pq pinv(B_q)) ||^2.

    Each G_pq is first projected onto the range of x -> B_p^T diag(x) B_q; the
    largest relative projection residual is reported and must stay below 1e-6.
    """
    total = 0.0
    worst = 0.0
    for (p, q), Gpq in G.items():
        Gpq = np.asarray(Gpq, dtype=np.float64)
        n = Gpq.shape[0]
        A2p = pooling_operator(h2, n).pinv()
        Bp, Bq = shifted_pooling(h1, p, n), shifted_pooling(h1, q, n)
        Bpp_p, Bpp_q = svd_pinv(Bp), svd_pinv(Bq)
        M = _range_basis(Bp, Bq)
        Mp = np.linalg.pinv(M, rcond=SVD_CUTOFF)

        def one(g):
            nonlocal worst
            coef = Mp @ g.ravel()
            proj = (M @ coef).reshape(g.shape)
            worst = max(worst, float(np.linalg.norm(g - proj)) / max(1.0, float(np.linalg.norm(g))))
            d = np.diagonal(Bpp_p.T @ proj @ Bpp_q).copy()
            return A2p.T @ d

        Fpq = _channel_map(one, Gpq)
        total += float(np.sum(Fpq ** 2))
    if worst > RANGE_TOL:
        raise InfeasibleError(f"decomposition outside operator range: residual {worst:.3e}")
    return PenaltyResult(total, worst)
