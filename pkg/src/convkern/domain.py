"""Cyclic grids, multi-channel signals, patch shapes, pooling filters and DFTs.

Index conventions used throughout the package:

* a signal on a grid of extents ``(n_0, ..., n_{r-1})`` stores its values as a
  ``(|Omega|, p)`` array, positions flattened row-major;
* patch extraction reads ``x[u + v]`` for each offset ``v``;
* pooling computes ``A x[u] = sum_v h[s u - v] x[v]``, i.e. for every tap
  offset ``t`` the input sample ``x[s u - t]`` is weighted by ``h[t]``;
* the translation ``L_c x[u] = x[u - c]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PERIODIC = "periodic"
ZERO_PAD = "zero-pad"
_BOUNDARIES = (PERIODIC, ZERO_PAD)
_FILTER_KINDS = ("gaussian", "average", "dirac", "custom")


@dataclass(frozen=True)
class Grid:
    """A 1-D or 2-D grid, cyclic by default."""

    extents: tuple[int, ...]
    boundary: str = PERIODIC

    def __post_init__(self):
        extents = tuple(int(e) for e in np.atleast_1d(self.extents))
        object.__setattr__(self, "extents", extents)
        if len(extents) not in (1, 2):
            raise ValueError(f"grid rank must be 1 or 2, got {len(extents)}")
        if any(e < 1 for e in extents):
            raise ValueError(f"grid extents must be >= 1, got {extents}")
        if self.boundary not in _BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def rank(self) -> int:
        return len(self.extents)

    @property
    def size(self) -> int:
        return math.prod(self.extents)

    def downsampled(self, stride: int) -> "Grid":
        bad = [e for e in self.extents if e % stride]
        if bad:
            raise ValueError(
                f"stride {stride} does not divide grid extents {self.extents}")
        return Grid(tuple(e // stride for e in self.extents), self.boundary)

    def to_dict(self) -> dict:
        return {"extents": list(self.extents), "boundary": self.boundary}


@dataclass(frozen=True, eq=False)
class Signal:
    """Multi-channel values on a grid, stored as a read-only (|Omega|, p) array."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.size:
            raise ValueError(
                f"values of shape {v.shape} do not fit grid of size {self.grid.size}")
        if v.shape[1] < 1:
            raise ValueError("signal needs at least one channel")
        if not np.all(np.isfinite(v)):
            raise ValueError("signal values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def grid_values(self) -> np.ndarray:
        """Values reshaped to ``extents + (p,)``."""
        return self.values.reshape(self.grid.extents + (self.channels,))


def signal_1d(values: Sequence[float] | np.ndarray, boundary: str = PERIODIC) -> Signal:
    v = np.asarray(values, dtype=np.float64)
    return Signal(Grid((v.shape[0],), boundary), v)


@dataclass(frozen=True)
class PatchShape:
    """Ordered list of grid offsets; ints are promoted to 1-tuples."""

    offsets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        offs = []
        for o in self.offsets:
            o = (int(o),) if np.isscalar(o) else tuple(int(c) for c in o)
            offs.append(o)
        if not offs:
            raise ValueError("patch shape needs at least one offset")
        if len(set(offs)) != len(offs):
            raise ValueError(f"duplicate patch offsets in {offs}")
        if len({len(o) for o in offs}) != 1:
            raise ValueError("patch offsets of mixed rank")
        object.__setattr__(self, "offsets", tuple(offs))

    @property
    def rank(self) -> int:
        return len(self.offsets[0])

    def __len__(self) -> int:
        return len(self.offsets)

    @classmethod
    def box(cls, size: int, rank: int = 1) -> "PatchShape":
        """Centered box of ``size`` per axis (``size=3`` gives offsets -1, 0, 1)."""
        lo = -(size // 2)
        axis = range(lo, lo + size)
        return cls(tuple(itertools.product(axis, repeat=rank)))

    def to_list(self) -> list:
        if self.rank == 1:
            return [o[0] for o in self.offsets]
        return [list(o) for o in self.offsets]


def _axis_index(n: int, shift: np.ndarray, boundary: str) -> np.ndarray:
    """Wrap (periodic) or flag out-of-range positions with the sentinel ``n``."""
    if boundary == PERIODIC:
        return np.mod(shift, n)
    return np.where((shift >= 0) & (shift < n), shift, n)


def gather(arr: np.ndarray, axis: int, index: np.ndarray, boundary: str) -> np.ndarray:
    """``np.take`` along ``axis``; sentinel indices read zeros under zero padding."""
    if boundary == ZERO_PAD and np.any(index == arr.shape[axis]):
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (0, 1)
        arr = np.pad(arr, pad)
    return np.take(arr, index, axis=axis)


def shift_index(n: int, offset: int, boundary: str) -> np.ndarray:
    """Index array reading position ``u + offset`` for ``u`` in ``range(n)``."""
    return _axis_index(n, np.arange(n) + offset, boundary)


def extract_patches(x: Signal, patch: PatchShape) -> Signal:
    """Concatenate ``x[u + v]`` over the patch offsets ``v`` at every position."""
    if patch.rank != x.grid.rank:
        raise ValueError(
            f"patch rank {patch.rank} does not match grid rank {x.grid.rank}")
    g = x.grid_values()
    blocks = []
    for off in patch.offsets:
        b = g
        for axis, (n, o) in enumerate(zip(x.grid.extents, off)):
            b = gather(b, axis, shift_index(n, o, x.grid.boundary), x.grid.boundary)
        blocks.append(b)
    out = np.concatenate(blocks, axis=-1)
    return Signal(x.grid, out.reshape(x.grid.size, -1))


def translate(x: Signal, shift: int | Sequence[int]) -> Signal:
    """Cyclic translation ``L_c x[u] = x[u - c]``."""
    shift = (shift,) if np.isscalar(shift) else tuple(shift)
    if x.grid.boundary != PERIODIC:
        raise ValueError("translation is only defined on periodic grids")
    g = np.roll(x.grid_values(), shift, axis=tuple(range(x.grid.rank)))
    return Signal(x.grid, g.reshape(x.grid.size, -1))


@dataclass(frozen=True, eq=False)
class PoolingFilter:
    """Separable pooling filter with integer stride.

    ``axis_taps[i]`` is the weight at offset ``axis_offsets[i]`` along every
    axis; for rank 2 the full filter is the outer product of the axis filter
    with itself.
    """

    axis_offsets: tuple[int, ...]
    axis_taps: np.ndarray
    stride: int = 1
    kind: str = "custom"
    rank: int = 1
    _normalize: bool = field(default=False, repr=False)

    def __post_init__(self):
        offs = tuple(int(o) for o in self.axis_offsets)
        taps = np.array(self.axis_taps, dtype=np.float64).reshape(-1)
        if len(offs) != taps.shape[0] or not offs:
            raise ValueError("filter offsets and taps must be non-empty and aligned")
        if len(set(offs)) != len(offs):
            raise ValueError("duplicate filter offsets")
        if self.kind not in _FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.rank not in (1, 2):
            raise ValueError("filter rank must be 1 or 2")
        if not np.all(np.isfinite(taps)):
            raise ValueError("filter taps must be finite")
        if self._normalize:
            taps = taps / math.fsum(taps)
        taps.setflags(write=False)
        object.__setattr__(self, "axis_offsets", offs)
        object.__setattr__(self, "axis_taps", taps)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def taps(self) -> np.ndarray:
        if self.rank == 1:
            return self.axis_taps
        return np.outer(self.axis_taps, self.axis_taps)

    @property
    def radius(self) -> int:
        return max(abs(o) for o in self.axis_offsets)

    def on_grid(self, n: int) -> np.ndarray:
        """Axis filter wrapped onto a cyclic grid of ``n`` points (``h[u mod n]``)."""
        h = np.zeros(n)
        for o, t in zip(self.axis_offsets, self.axis_taps):
            h[o % n] += t
        return h

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "stride": self.stride, "rank": self.rank}
        d["offsets"] = list(self.axis_offsets)
        d["taps"] = [float(t) for t in self.axis_taps]
        return d


def gaussian_filter(s: int, rank: int = 1, stride: int | None = None) -> PoolingFilter:
    """Gaussian filter with 2s+1 taps per axis and bandwidth sqrt(2) s."""
    if s < 1:
        raise ValueError("gaussian filter needs s >= 1")
    u = np.arange(-s, s + 1)
    bandwidth2 = 2.0 * s * s
    taps = np.exp(-u.astype(np.float64) ** 2 / (2.0 * bandwidth2))
    return PoolingFilter(tuple(u), taps, stride=s if stride is None else stride,
                         kind="gaussian", rank=rank, _normalize=True)


def average_filter(size: int, stride: int = 1, rank: int = 1) -> PoolingFilter:
    """Box filter of ``size`` taps, weights 1/size per axis.

    With ``size`` equal to the grid extent this is global average pooling.
    """
    lo = -(size // 2)
    return PoolingFilter(tuple(range(lo, lo + size)), np.ones(size), stride=stride,
                         kind="average", rank=rank, _normalize=True)


def dirac_filter(stride: int = 1, rank: int = 1) -> PoolingFilter:
    return PoolingFilter((0,), np.ones(1), stride=stride, kind="dirac", rank=rank)


def custom_filter(offsets: Sequence[int], taps: Sequence[float], stride: int = 1,
                  rank: int = 1, normalize: bool = False) -> PoolingFilter:
    return PoolingFilter(tuple(offsets), np.asarray(taps), stride=stride,
                         kind="custom", rank=rank, _normalize=normalize)


def filter_from_dict(d: dict) -> PoolingFilter:
    return PoolingFilter(tuple(d["offsets"]), np.asarray(d["taps"]),
                         stride=int(d.get("stride", 1)), kind=d.get("kind", "custom"),
                         rank=int(d.get("rank", 1)))


def pool_index(n: int, h: PoolingFilter, boundary: str) -> np.ndarray:
    """Index array of shape (taps, n // stride) reading ``x[s u - t]`` per tap ``t``."""
    if n % h.stride:
        raise ValueError(f"stride {h.stride} does not divide extent {n}")
    u = np.arange(n // h.stride) * h.stride
    return np.stack([_axis_index(n, u - t, boundary) for t in h.axis_offsets])


def pool_axis(arr: np.ndarray, axis: int, h: PoolingFilter, index: np.ndarray,
              boundary: str) -> np.ndarray:
    """Pool ``arr`` along one axis, summing taps in their stored order."""
    out = None
    for w, idx in zip(h.axis_taps, index):
        term = w * gather(arr, axis, idx, boundary)
        if out is None:
            out = term
        else:
            out += term
    return out


def pool(x: Signal, h: PoolingFilter) -> Signal:
    """Convolve with ``h`` and downsample by its stride."""
    if h.rank != x.grid.rank:
        raise ValueError(f"filter rank {h.rank} does not match grid rank {x.grid.rank}")
    out_grid = x.grid.downsampled(h.stride)
    g = x.grid_values()
    for axis, n in enumerate(x.grid.extents):
        g = pool_axis(g, axis, h, pool_index(n, h, x.grid.boundary), x.grid.boundary)
    return Signal(out_grid, g.reshape(out_grid.size, -1))


def dft(x: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    """Unnormalized DFT ``X[w] = sum_u x[u] exp(-2 i pi w u / N)`` (separable in 2-D)."""
    x = np.asarray(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    return np.fft.fftn(x, axes=axes)


def idft(x: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    x = np.asarray(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    return np.fft.ifftn(x, axes=axes)
