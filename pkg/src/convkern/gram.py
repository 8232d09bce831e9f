"""Tiled, threaded and resumable Gram matrices with on-disk persistence.

File layout (little-endian)::

    magic  b"CKGRAM01"
    header version u32, n u64, tile u32, arch_fp u64, data_fp u64
    slots  one tile x tile block of f64 per upper-triangular tile (ti <= tj),
           slot order row-major over (ti, tj); edge tiles are zero padded

A text ledger ``<file>.ledger`` holds lines ``ti tj status checksum``; the last
line for a tile wins.  Tile data is written before its ``done`` line, so a
crash can at worst lose a tile that will then be recomputed.
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import ckmap
from .ckmap import ArchSpec

MAGIC = b"CKGRAM01"
VERSION = 1
_HEADER = struct.Struct("<8sIQIQQ")
DEFAULT_TILE = 128
IO_RETRIES = 3


class GramFormatError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GramMatrix:
    K: np.ndarray
    arch_fp: int
    data_fp: int
    tile: int = DEFAULT_TILE
    path: Path | None = None

    @property
    def n(self) -> int:
        return self.K.shape[0]


@dataclass(frozen=True, eq=False)
class CrossGram:
    K: np.ndarray          # (n_test, n_train)
    arch_fp: int
    train_fp: int
    test_fp: int


def data_fingerprint(X: np.ndarray) -> int:
    X = np.ascontiguousarray(X, dtype=np.float64)
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(X.shape, dtype="<i8").tobytes())
    h.update(X.astype("<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def _as_values(data) -> tuple[np.ndarray, int]:
    """Accept a Dataset-like object (``values``/``fingerprint``) or a raw array."""
    if hasattr(data, "values") and hasattr(data, "fingerprint"):
        return np.ascontiguousarray(data.values, dtype=np.float64), int(data.fingerprint)
    X = np.ascontiguousarray(data, dtype=np.float64)
    return X, data_fingerprint(X)


def tile_checksum(block: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(block, dtype="<f8").tobytes(),
                           digest_size=8).hexdigest()


def n_tiles(n: int, tile: int) -> int:
    return -(-n // tile)


def slot_index(ti: int, tj: int, nt: int) -> int:
    return ti * nt - ti * (ti - 1) // 2 + (tj - ti)


def upper_tiles(nt: int) -> list[tuple[int, int]]:
    return [(ti, tj) for ti in range(nt) for tj in range(ti, nt)]


class TileLedger:
    """Per-tile status and checksums, persisted as appended text lines."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.status: dict[tuple[int, int], tuple[str, str]] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                parts = line.split()
                if len(parts) != 4:
                    continue    # torn final line after a crash
                ti, tj, st, ck = parts
                self.status[(int(ti), int(tj))] = (st, ck)

    def done(self, key) -> bool:
        return self.status.get(key, ("pending", ""))[0] == "done"

    def checksum(self, key) -> str:
        return self.status.get(key, ("pending", ""))[1]

    def _append(self, lines: list[str]):
        with open(self.path, "a") as f:
            f.write("".join(lines))
            f.flush()
            os.fsync(f.fileno())

    def init(self, tiles):
        self._append([f"{ti} {tj} pending 0000000000000000\n" for ti, tj in tiles])
        for key in tiles:
            self.status[key] = ("pending", "0000000000000000")

    def mark(self, key, status: str, checksum: str):
        self._append([f"{key[0]} {key[1]} {status} {checksum}\n"])
        self.status[key] = (status, checksum)


def _retry(fn, *args):
    for attempt in range(IO_RETRIES):
        try:
            return fn(*args)
        except OSError:
            if attempt == IO_RETRIES - 1:
                raise
            time.sleep(0.05 * (attempt + 1))


class GramFile:
    def __init__(self, path: Path, n: int, tile: int, arch_fp: int, data_fp: int):
        self.path = Path(path)
        self.n, self.tile, self.arch_fp, self.data_fp = n, tile, arch_fp, data_fp
        self.nt = n_tiles(n, tile)

    @property
    def size(self) -> int:
        return _HEADER.size + self.nt * (self.nt + 1) // 2 * self.tile * self.tile * 8

    def offset(self, ti: int, tj: int) -> int:
        return _HEADER.size + slot_index(ti, tj, self.nt) * self.tile * self.tile * 8

    def create(self):
        with open(self.path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, self.n, self.tile, self.arch_fp, self.data_fp))
            f.truncate(self.size)

    @classmethod
    def open(cls, path: Path) -> "GramFile":
        with open(path, "rb") as f:
            raw = f.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise GramFormatError(f"{path}: truncated header")
        magic, version, n, tile, afp, dfp = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise GramFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise GramFormatError(f"{path}: unsupported version {version}")
        g = cls(path, n, tile, afp, dfp)
        if os.path.getsize(path) != g.size:
            raise GramFormatError(f"{path}: size {os.path.getsize(path)} != expected {g.size}")
        return g

    def write_tile(self, ti: int, tj: int, block: np.ndarray):
        buf = np.zeros((self.tile, self.tile), dtype="<f8")
        buf[:block.shape[0], :block.shape[1]] = block
        with open(self.path, "r+b") as f:
            f.seek(self.offset(ti, tj))
            f.write(buf.tobytes())
            f.flush()
            os.fsync(f.fileno())

    def read_tile(self, ti: int, tj: int) -> np.ndarray:
        with open(self.path, "rb") as f:
            f.seek(self.offset(ti, tj))
            raw = f.read(self.tile * self.tile * 8)
        buf = np.frombuffer(raw, dtype="<f8").reshape(self.tile, self.tile)
        r = min(self.tile, self.n - ti * self.tile)
        c = min(self.tile, self.n - tj * self.tile)
        return buf[:r, :c].astype(np.float64)

    def assemble(self) -> np.ndarray:
        K = np.empty((self.n, self.n))
        t = self.tile
        for ti, tj in upper_tiles(self.nt):
            b = self.read_tile(ti, tj)
            K[ti * t:ti * t + b.shape[0], tj * t:tj * t + b.shape[1]] = b
            K[tj * t:tj * t + b.shape[1], ti * t:ti * t + b.shape[0]] = b.T
        return K


def _tile_pairs(ti: int, tj: int, tile: int, n: int):
    r0, r1 = ti * tile, min(n, (ti + 1) * tile)
    c0, c1 = tj * tile, min(n, (tj + 1) * tile)
    ii, jj = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    if ti == tj:
        keep = ii <= jj
        return ii[keep], jj[keep], (r0, r1, c0, c1)
    return ii.ravel(), jj.ravel(), (r0, r1, c0, c1)


def _compute_tile(arch, X, caches, ti, tj, tile, n) -> np.ndarray:
    ii, jj, (r0, r1, c0, c1) = _tile_pairs(ti, tj, tile, n)
    vals = ckmap.kernel_pairs(arch, X, caches, X, caches, ii, jj)
    block = np.zeros((r1 - r0, c1 - c0))
    block[ii - r0, jj - c0] = vals
    if ti == tj:
        block[jj - r0, ii - c0] = vals
    return block


class _BlockCaches:
    """Self caches computed per row block, then concatenated for the pairs API."""

    def __init__(self, arch: ArchSpec, X: np.ndarray, tile: int, blocks: set[int]):
        n = X.shape[0]
        depth = arch.depth
        norms = [np.zeros((n, arch.layer_grid(l).size)) for l in range(depth)]
        values = np.zeros(n)
        digests = [b""] * n
        for b in sorted(blocks):
            sl = slice(b * tile, min(n, (b + 1) * tile))
            c = ckmap.self_caches(arch, X[sl])
            for l in range(depth):
                norms[l][sl] = c.norms[l]
            values[sl] = c.values
            digests[sl] = c.digests
        self.batch = ckmap.SelfCacheBatch(arch.fingerprint, tuple(norms), values, tuple(digests))


def compute_gram(arch: ArchSpec, data, tile_size: int = DEFAULT_TILE, workers: int = 1,
                 path: str | Path | None = None,
                 on_tile: Callable[[int, int, int], None] | None = None) -> GramMatrix:
    """K[i, j] = K_L(x_i, x_j) over a dataset.

    With ``path`` the matrix is persisted tile by tile and an existing file is
    resumed: tiles whose ledger status is ``done`` and whose checksum matches
    the stored bytes are kept, all others recomputed.  ``on_tile(ti, tj, k)``
    is called after the k-th tile of this run has been committed; raising from
    it aborts the run, which is how interruption is simulated in tests.
    """
    X, dfp = _as_values(data)
    if X.ndim != 3 or X.shape[1:] != (arch.grid.size, arch.channels):
        raise ValueError(f"dataset values of shape {X.shape} do not fit the architecture")
    n = X.shape[0]
    if tile_size < 1:
        raise ValueError("tile size must be positive")
    afp = arch.fingerprint
    nt = n_tiles(n, tile_size)
    tiles = upper_tiles(nt)

    gf = ledger = None
    pending = tiles
    if path is not None:
        path = Path(path)
        lpath = Path(str(path) + ".ledger")
        if path.exists():
            gf = GramFile.open(path)
            if gf.arch_fp != afp or gf.data_fp != dfp:
                raise FingerprintMismatch(
                    f"{path} was computed for a different architecture or dataset")
            if gf.n != n or gf.tile != tile_size:
                raise FingerprintMismatch(f"{path} has n={gf.n}, tile={gf.tile}")
            ledger = TileLedger(lpath)
            pending = [k for k in tiles
                       if not (ledger.done(k) and tile_checksum(gf.read_tile(*k)) == ledger.checksum(k))]
        else:
            if lpath.exists():
                lpath.unlink()
            gf = GramFile(path, n, tile_size, afp, dfp)
            _retry(gf.create)
            ledger = TileLedger(lpath)
            ledger.init(tiles)

    K = None if gf is not None else np.empty((n, n))
    if pending:
        blocks = {b for k in pending for b in k}
        caches = _BlockCaches(arch, X, tile_size, blocks).batch

        def commit(key, block, count):
            if gf is not None:
                _retry(gf.write_tile, key[0], key[1], block)
                ledger.mark(key, "done", tile_checksum(block))
            else:
                r0, c0 = key[0] * tile_size, key[1] * tile_size
                K[r0:r0 + block.shape[0], c0:c0 + block.shape[1]] = block
                K[c0:c0 + block.shape[1], r0:r0 + block.shape[0]] = block.T
            if on_tile is not None:
                on_tile(key[0], key[1], count)

        if workers <= 1:
            for count, key in enumerate(pending, 1):
                commit(key, _compute_tile(arch, X, caches, *key, tile_size, n), count)
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                futs = [(key, ex.submit(_compute_tile, arch, X, caches, *key, tile_size, n))
                        for key in pending]
                try:
                    # commits happen in canonical tile order on this thread only
                    for count, (key, fut) in enumerate(futs, 1):
                        commit(key, fut.result(), count)
                except BaseException:
                    for _, fut in futs:
                        fut.cancel()
                    raise
    if gf is not None:
        K = gf.assemble()
    return GramMatrix(K, afp, dfp, tile_size, path)


def read_gram(path: str | Path, check: bool = True) -> GramMatrix:
    path = Path(path)
    gf = GramFile.open(path)
    if check:
        ledger = TileLedger(Path(str(path) + ".ledger"))
        for key in upper_tiles(gf.nt):
            if not ledger.done(key):
                raise GramFormatError(f"{path}: tile {key} not computed")
            if tile_checksum(gf.read_tile(*key)) != ledger.checksum(key):
                raise GramFormatError(f"{path}: checksum mismatch on tile {key}")
    return GramMatrix(gf.assemble(), gf.arch_fp, gf.data_fp, gf.tile, path)


def write_gram(path: str | Path, K: np.ndarray, arch_fp: int, data_fp: int,
               tile: int = DEFAULT_TILE) -> Path:
    """Persist an in-memory symmetric matrix in the tiled format."""
    path = Path(path)
    n = K.shape[0]
    gf = GramFile(path, n, tile, arch_fp, data_fp)
    gf.create()
    lpath = Path(str(path) + ".ledger")
    if lpath.exists():
        lpath.unlink()
    ledger = TileLedger(lpath)
    for ti, tj in upper_tiles(gf.nt):
        b = K[ti * tile:(ti + 1) * tile, tj * tile:(tj + 1) * tile]
        gf.write_tile(ti, tj, b)
        ledger.mark((ti, tj), "done", tile_checksum(b))
    return path


def cross_gram(arch: ArchSpec, train, test, workers: int = 1, block: int = DEFAULT_TILE
               ) -> CrossGram:
    """Rectangular matrix K[i, j] = K_L(test_i, train_j)."""
    Xtr, trfp = _as_values(train)
    Xte, tefp = _as_values(test)
    ctr = ckmap.self_caches(arch, Xtr)
    cte = ckmap.self_caches(arch, Xte)
    m, n = Xte.shape[0], Xtr.shape[0]
    K = np.empty((m, n))

    def rows(r0):
        r1 = min(m, r0 + block)
        ii, jj = np.meshgrid(np.arange(r0, r1), np.arange(n), indexing="ij")
        return r0, ckmap.kernel_pairs(arch, Xte, cte, Xtr, ctr, ii.ravel(), jj.ravel()
                                      ).reshape(r1 - r0, n)

    starts = range(0, m, block)
    if workers <= 1:
        results = map(rows, starts)
    else:
        ex = ThreadPoolExecutor(max_workers=workers)
        results = ex.map(rows, starts)
    for r0, vals in results:
        K[r0:r0 + vals.shape[0]] = vals
    if workers > 1:
        ex.shutdown()
    return CrossGram(K, arch.fingerprint, trfp, tefp)


def eigen_decay(K, top_m: int | None = None) -> np.ndarray:
    """Eigenvalues in descending order (at most ``top_m``)."""
    K = K.K if isinstance(K, GramMatrix) else np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if n > 4096:
        raise ValueError("dense eigensolver limited to n <= 4096")
    if not np.all(np.isfinite(K)):
        raise ValueError("Gram matrix has non-finite entries")
    ev = np.linalg.eigvalsh(0.5 * (K + K.T))[::-1]
    return ev if top_m is None else ev[:min(top_m, n)]


def psd_margin(K: np.ndarray) -> float:
    """lambda_min / trace; the PSD check requires this to be >= -1e-8."""
    tr = float(np.trace(K))
    lo = float(np.linalg.eigvalsh(0.5 * (K + K.T))[0])
    return lo / tr if tr > 0 else lo


def verify_gram(K) -> dict:
    G = K.K if isinstance(K, GramMatrix) else np.asarray(K, dtype=np.float64)
    finite = bool(np.all(np.isfinite(G)))
    report = {"n": int(G.shape[0]), "finite": finite,
              "symmetric": bool(np.array_equal(G, G.T)),
              "diag_nonneg": bool(np.all(np.diag(G) >= 0)) if finite else False}
    report["psd_margin"] = psd_margin(G) if finite else float("nan")
    report["psd"] = bool(finite and report["psd_margin"] >= -1e-8)
    report["ok"] = all(report[k] for k in ("finite", "symmetric", "diag_nonneg", "psd"))
    return report
