"""Datasets: CIFAR-10 binary batches, patch ZCA whitening, sphere-product samples."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import PERIODIC, Grid, PatchShape, Signal, gather, shift_index

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)
CACHE_MAGIC = b"CKDATA01"
_CACHE_HEADER = struct.Struct("<8sIQIQQBIBQI")
SPHERE_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class Dataset:
    """``values`` has shape (n, |Omega|, p); ``meta`` records preprocessing."""

    grid: Grid
    values: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[1] != self.grid.size:
            raise ValueError(f"values of shape {v.shape} do not fit grid {self.grid.extents}")
        if not np.all(np.isfinite(v)):
            raise ValueError("dataset values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (v.shape[0],):
                raise ValueError("one label per signal expected")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def signal(self, i: int) -> Signal:
        return Signal(self.grid, self.values[i])

    @property
    def signals(self) -> list[Signal]:
        return [self.signal(i) for i in range(len(self))]

    @property
    def fingerprint(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(json.dumps({"grid": self.grid.to_dict(), "shape": list(self.values.shape),
                             "meta": self.meta}, sort_keys=True).encode())
        h.update(self.values.astype("<f8").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype("<i8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        meta = dict(self.meta)
        meta["subset"] = hashlib.blake2b(idx.astype("<i8").tobytes(), digest_size=8).hexdigest()
        return Dataset(self.grid, self.values[idx],
                       None if self.labels is None else self.labels[idx], meta)


def from_signals(signals: Sequence[Signal], labels=None, meta: dict | None = None) -> Dataset:
    grids = {s.grid for s in signals}
    if len(grids) != 1 or len({s.channels for s in signals}) != 1:
        raise ValueError("signals must share grid and channel count")
    return Dataset(grids.pop(), np.stack([s.values for s in signals]), labels, meta or {})


# -- CIFAR-10 -----------------------------------------------------------------

def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """(labels uint8 (n,), pixels uint8 (n, 3072)) in file order."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    return rec[:, 0].copy(), rec[:, 1:].copy()


def save_cifar_batch(path: str | Path, labels: np.ndarray, pixels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.shape != (labels.shape[0], CIFAR_RECORD - 1):
        raise ValueError("pixels must have shape (n, 3072)")
    np.concatenate([labels[:, None], pixels], axis=1).tofile(path)


def cifar_pixels_to_values(pixels: np.ndarray) -> np.ndarray:
    """(n, 3072) planar R, G, B rows -> (n, 1024, 3) floats in [0, 1]."""
    img = pixels.reshape(-1, 3, CIFAR_SIDE * CIFAR_SIDE).transpose(0, 2, 1)
    return img.astype(np.float64) / 255.0


def load_cifar10(path: str | Path, split: str = "train", limit: int | None = None,
                 boundary: str = PERIODIC) -> Dataset:
    path = Path(path)
    names = CIFAR_TRAIN if split == "train" else CIFAR_TEST
    files = [path / f for f in names]
    if not files or not all(f.exists() for f in files):
        missing = [str(f) for f in files if not f.exists()]
        raise FileNotFoundError(f"CIFAR-10 batches not found: {missing}")
    labels, pixels = [], []
    total = 0
    for f in files:
        lab, pix = read_cifar_batch(f)
        labels.append(lab)
        pixels.append(pix)
        total += lab.shape[0]
        if limit is not None and total >= limit:
            break
    lab = np.concatenate(labels)[:limit]
    pix = np.concatenate(pixels)[:limit]
    if lab.size and lab.max() > 9:
        raise ValueError(f"label {lab.max()} outside 0..9")
    return Dataset(Grid((CIFAR_SIDE, CIFAR_SIDE), boundary), cifar_pixels_to_values(pix), lab,
                   {"source": "cifar10", "split": split, "n": int(lab.shape[0])})


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Block-average a 2-D dataset by ``factor`` per axis."""
    if factor == 1:
        return ds
    ext = ds.grid.extents
    if ds.grid.rank != 2 or any(e % factor for e in ext):
        raise ValueError(f"factor {factor} does not divide 2-D grid {ext}")
    h, w = ext[0] // factor, ext[1] // factor
    v = ds.values.reshape(len(ds), h, factor, w, factor, ds.channels).mean(axis=(2, 4))
    meta = dict(ds.meta)
    meta["downsample"] = factor
    return Dataset(Grid((h, w), ds.grid.boundary), v.reshape(len(ds), h * w, ds.channels),
                   ds.labels, meta)


# -- ZCA ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ZcaTransform:
    patch: PatchShape
    mean: np.ndarray
    W: np.ndarray
    eps: float
    mode: str = "patch"


def _patch_matrix(ds: Dataset, patch: PatchShape) -> tuple[np.ndarray, np.ndarray]:
    """Patches of every image, (n, |Omega|, |S| p), and a mask of in-range offsets."""
    g = ds.grid
    G = ds.values.reshape((len(ds),) + g.extents + (ds.channels,))
    blocks, masks = [], []
    for off in patch.offsets:
        b = G
        m = np.ones(g.extents, dtype=bool)
        for a, (n, o) in enumerate(zip(g.extents, off)):
            idx = shift_index(n, o, g.boundary)
            b = gather(b, 1 + a, idx, g.boundary)
            shape = [1] * g.rank
            shape[a] = n
            m = m & (idx < n).reshape(shape)
        blocks.append(b.reshape(len(ds), g.size, ds.channels))
        masks.append(m.reshape(g.size))
    return np.concatenate(blocks, axis=-1), np.stack(masks, axis=1)


def _inv_sqrt(C: np.ndarray, eps: float) -> np.ndarray:
    C = 0.5 * (C + C.T)
    s, U = np.linalg.eigh(C)
    if s[0] < -1e-8 * max(abs(s[-1]), 1e-300):
        raise np.linalg.LinAlgError(f"patch covariance is not PSD (min eigenvalue {s[0]:.3e})")
    s = np.maximum(s, 0.0)
    return (U / np.sqrt(s + eps)) @ U.T


def fit_zca(ds: Dataset, patch: PatchShape, eps: float | None = None, mode: str = "patch"
            ) -> ZcaTransform:
    """Fit a ZCA whitening of image patches (``mode='patch'``) or whole images."""
    if mode == "global":
        P = ds.values.reshape(len(ds), -1)
    elif mode == "patch":
        P = _patch_matrix(ds, patch)[0].reshape(-1, len(patch) * ds.channels)
    else:
        raise ValueError(f"unknown ZCA mode {mode!r}")
    mean = P.mean(axis=0)
    X = P - mean
    C = X.T @ X / X.shape[0]
    if eps is None:
        eps = 1e-5 * float(np.trace(C)) / C.shape[0]
    if not eps > 0:
        raise ValueError("ZCA regularizer must be positive")
    return ZcaTransform(patch, mean, _inv_sqrt(C, eps), float(eps), mode)


def whiten_patches(ds: Dataset, t: ZcaTransform) -> np.ndarray:
    P, _ = _patch_matrix(ds, t.patch)
    return (P - t.mean) @ t.W


def apply_zca(ds: Dataset, t: ZcaTransform) -> Dataset:
    """Whiten every patch, then set each pixel to the mean of its covering whitened patches."""
    meta = dict(ds.meta)
    meta["zca"] = {"mode": t.mode, "eps": t.eps, "patch": t.patch.to_list()}
    if t.mode == "global":
        v = (ds.values.reshape(len(ds), -1) - t.mean) @ t.W
        return Dataset(ds.grid, v.reshape(ds.values.shape), ds.labels, meta)
    g = ds.grid
    p = ds.channels
    Z = whiten_patches(ds, t)                       # (n, |Omega|, |S| p)
    _, mask = _patch_matrix(ds, t.patch)
    out = np.zeros((len(ds),) + g.extents + (p,))
    count = np.zeros(g.extents)
    for k, off in enumerate(t.patch.offsets):
        # the patch at u holds pixel u + off in its k-th block
        blk = Z[:, :, k * p:(k + 1) * p] * mask[:, k][None, :, None]
        blk = blk.reshape((len(ds),) + g.extents + (p,))
        cnt = mask[:, k].reshape(g.extents).astype(np.float64)
        for a, o in enumerate(off):
            idx = shift_index(g.extents[a], -o, g.boundary)
            blk = gather(blk, 1 + a, idx, g.boundary)
            cnt = gather(cnt, a, idx, g.boundary)
        out += blk
        count += cnt
    out = out / np.maximum(count, 1.0)[None, ..., None]
    return Dataset(g, out.reshape(len(ds), g.size, p), ds.labels, meta)


# -- synthetic ------------------------------------------------------------------

def sphere_points(n: int, d: int, seed: int, stream: int = 0) -> np.ndarray:
    """n uniform points on S^{d-1}; counter-based, so blocks can be drawn in any order."""
    out = np.empty((n, d))
    for b in range(0, n, SPHERE_BLOCK):
        m = min(SPHERE_BLOCK, n - b)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, b])))
        z = rng.standard_normal((m, d))
        out[b:b + m] = z / np.linalg.norm(z, axis=1, keepdims=True)
    return out


def gen_product_of_spheres(n_positions: int, d: int, n: int, seed: int) -> Dataset:
    """n signals with |Omega| i.i.d. uniform unit patches in R^d as channel blocks."""
    if d < 2:
        raise ValueError("d must be >= 2")
    Z = sphere_points(n * n_positions, d, seed).reshape(n, n_positions, d)
    return Dataset(Grid((n_positions,)), Z, None,
                   {"source": "spheres", "d": d, "n_positions": n_positions, "seed": seed})


def random_images(n: int, grid: Grid, channels: int, seed: int, sigma: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(grid, sigma * rng.standard_normal((n, grid.size, channels)), None,
                   {"source": "noise", "seed": seed, "sigma": sigma})


def labeled_noise(n: int, grid: Grid, channels: int, seed: int) -> Dataset:
    """Gaussian images labeled by the channel with the largest mean (a learnable toy task)."""
    ds = random_images(n, grid, channels, seed)
    labels = np.argmax(ds.values.mean(axis=1), axis=1)
    return Dataset(grid, ds.values, labels, {"source": "noise", "seed": seed, "labeled": True})


# -- cache files ----------------------------------------------------------------

def save_dataset(path: str | Path, ds: Dataset):
    ext = list(ds.grid.extents) + [0] * (2 - ds.grid.rank)
    meta = json.dumps({"meta": ds.meta, "boundary": ds.grid.boundary}, sort_keys=True).encode()
    has_labels = ds.labels is not None
    with open(path, "wb") as f:
        f.write(_CACHE_HEADER.pack(CACHE_MAGIC, 1, len(ds), ds.grid.rank, ext[0], ext[1], 0,
                                   ds.channels, int(has_labels), ds.fingerprint, len(meta)))
        f.write(meta)
        f.write(ds.values.astype("<f8").tobytes())
        if has_labels:
            f.write(ds.labels.astype("<i8").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    (magic, version, n, rank, e0, e1, _, p, has_labels, fp, mlen) = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != 1:
        raise ValueError(f"{path}: not a dataset cache file")
    off = _CACHE_HEADER.size
    info = json.loads(raw[off:off + mlen])
    off += mlen
    extents = (e0,) if rank == 1 else (e0, e1)
    grid = Grid(extents, info["boundary"])
    cnt = n * grid.size * p
    v = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape(n, grid.size, p)
    off += 8 * cnt
    lab = np.frombuffer(raw, dtype="<i8", count=n, offset=off) if has_labels else None
    ds = Dataset(grid, v.astype(np.float64), None if lab is None else lab.astype(np.int64),
                 info["meta"])
    if ds.fingerprint != fp:
        raise ValueError(f"{path}: fingerprint mismatch, file is corrupt")
    return ds
