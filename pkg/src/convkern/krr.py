"""Kernel ridge regression: (K + n lam I) alpha = y, one-vs-all classification."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, cg

MAGIC = b"CKKRR001"
_HEADER = struct.Struct("<8sQQdQQ")   # magic, n, columns, lambda, arch_fp, data_fp
CG_THRESHOLD = 20_000
POS_TARGET = 0.9
NEG_TARGET = -0.1


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class KrrModel:
    alpha: np.ndarray          # (n,) or (n, C)
    lam: float
    arch_fp: int = 0
    data_fp: int = 0
    classes: np.ndarray | None = None
    residual: float = 0.0

    @property
    def n(self) -> int:
        return self.alpha.shape[0]


def _unwrap(K):
    if hasattr(K, "K"):
        return np.asarray(K.K, dtype=np.float64), getattr(K, "arch_fp", 0), getattr(K, "data_fp", 0)
    return np.asarray(K, dtype=np.float64), 0, 0


def _solve(K: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    n = K.shape[0]
    A = K + n * lam * np.eye(n)
    if n > CG_THRESHOLD:
        op = LinearOperator((n, n), matvec=lambda v: A @ v, dtype=np.float64)
        cols = []
        for c in range(Y.shape[1]):
            x, info = cg(op, Y[:, c], rtol=1e-12, maxiter=10 * n)
            if info != 0:
                raise SingularSystemError(f"conjugate gradient did not converge (info={info})")
            cols.append(x)
        return np.stack(cols, axis=1)
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        jitter = 1e-10 * float(np.trace(K)) / n
        A = A + jitter * np.eye(n)
        try:
            cf = linalg.cho_factor(A, lower=True)
        except linalg.LinAlgError as e:
            raise SingularSystemError(f"Cholesky failed after jitter {jitter:.3e}") from e
    X = linalg.cho_solve(cf, Y)
    # one step of iterative refinement absorbs most of the conditioning loss
    X = X + linalg.cho_solve(cf, Y - A @ X)
    return X


def fit(K, y, lam: float) -> KrrModel:
    """Minimizer of (1/n) sum (y_i - f(x_i))^2 + lam ||f||^2."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Km, afp, dfp = _unwrap(K)
    y = np.asarray(y, dtype=np.float64)
    if Km.ndim != 2 or Km.shape[0] != Km.shape[1] or Km.shape[0] != y.shape[0]:
        raise ValueError(f"Gram {Km.shape} and targets {y.shape} do not match")
    Y = y.reshape(y.shape[0], -1)
    alpha = _solve(Km, Y, lam)
    n = Km.shape[0]
    res = float(np.linalg.norm(Km @ alpha + n * lam * alpha - Y) / max(np.linalg.norm(Y), 1e-300))
    return KrrModel(alpha.reshape(y.shape), float(lam), afp, dfp, None, res)


def predict(model: KrrModel, K_cross) -> np.ndarray:
    """K_cross (m, n) times alpha."""
    Kc = np.asarray(K_cross.K if hasattr(K_cross, "K") else K_cross, dtype=np.float64)
    tr_fp = getattr(K_cross, "train_fp", None)
    if tr_fp is not None and model.data_fp and tr_fp != model.data_fp:
        raise ValueError("cross Gram was computed against a different training set")
    afp = getattr(K_cross, "arch_fp", None)
    if afp is not None and model.arch_fp and afp != model.arch_fp:
        raise ValueError("cross Gram was computed with a different architecture")
    if Kc.ndim != 2 or Kc.shape[1] != model.n:
        raise ValueError(f"cross Gram {Kc.shape} does not match {model.n} training points")
    return Kc @ model.alpha


def onevsall_targets(labels, classes, pos: float = POS_TARGET, neg: float = NEG_TARGET) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where(labels[:, None] == np.asarray(classes)[None, :], pos, neg)


def fit_onevsall(K, labels, lam: float, classes=None, pos: float = POS_TARGET,
                 neg: float = NEG_TARGET) -> KrrModel:
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    if classes.shape[0] < 2:
        raise ValueError("one-vs-all needs at least two classes")
    m = fit(K, onevsall_targets(labels, classes, pos, neg), lam)
    return KrrModel(m.alpha, m.lam, m.arch_fp, m.data_fp, classes, m.residual)


def classify(model: KrrModel, K_cross) -> np.ndarray:
    scores = predict(model, K_cross)
    idx = np.argmax(scores, axis=1)
    return idx if model.classes is None else model.classes[idx]


def excess_risk(pred, y_test, f_star) -> float:
    """mean (f_hat - y)^2 - mean (f* - y)^2 over the test set."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y_test, dtype=np.float64)
    fs = np.asarray(f_star, dtype=np.float64)
    if not (pred.shape == y.shape == fs.shape):
        raise ValueError(f"shape mismatch: {pred.shape}, {y.shape}, {fs.shape}")
    return float(np.mean((pred - y) ** 2) - np.mean((fs - y) ** 2))


def accuracy(pred_labels, labels) -> float:
    return float(np.mean(np.asarray(pred_labels) == np.asarray(labels)))


def per_class_accuracy(pred_labels, labels, classes) -> dict:
    pred_labels, labels = np.asarray(pred_labels), np.asarray(labels)
    out = {}
    for c in classes:
        sel = labels == c
        out[int(c)] = float(np.mean(pred_labels[sel] == c)) if sel.any() else float("nan")
    return out


def save_model(path: str | Path, model: KrrModel):
    A = model.alpha.reshape(model.n, -1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, A.shape[0], A.shape[1], model.lam, model.arch_fp, model.data_fp))
        classes = model.classes if model.classes is not None else np.zeros(0)
        f.write(struct.pack("<Q", len(classes)))
        f.write(np.asarray(classes, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(A, dtype="<f8").tobytes())


def load_model(path: str | Path) -> KrrModel:
    raw = Path(path).read_bytes()
    magic, n, c, lam, afp, dfp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a model file")
    off = _HEADER.size
    (nc,) = struct.unpack_from("<Q", raw, off)
    off += 8
    classes = np.frombuffer(raw, dtype="<i8", count=nc, offset=off).astype(np.int64)
    off += 8 * nc
    A = np.frombuffer(raw, dtype="<f8", count=n * c, offset=off).reshape(n, c).astype(np.float64)
    alpha = A[:, 0] if (c == 1 and nc == 0) else A
    return KrrModel(alpha, lam, afp, dfp, classes if nc else None)
