"""Spectra, degrees of freedom, trace bounds and the synthetic learning harness.

The data model throughout is the product of spheres: a signal has |Omega|
positions, each holding an independent uniform point of S^{d-1}.  Under this
model the one-layer kernel with patch size one and stride-1 pooling has the
Mercer decomposition used by ``predict_spectrum``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import ckmap, dpk, krr
from .ckmap import ArchSpec, LayerSpec
from .data import gen_product_of_spheres, sphere_points
from .domain import Grid, PatchShape, PoolingFilter, average_filter, dft, dirac_filter


def filter_spectrum(h: PoolingFilter, n: int) -> np.ndarray:
    """lambda_w = |h_hat[w]|^2 of the filter wrapped on n points (stride ignored)."""
    return np.abs(dft(h.on_grid(n))) ** 2


# -- Mercer spectrum ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MercerSpectrum:
    """Eigenvalues with multiplicities; ``k == 0`` marks the constant component."""

    eigenvalues: np.ndarray
    multiplicities: np.ndarray
    w: np.ndarray
    k: np.ndarray
    n_positions: int
    d: int
    total_trace: float          # sum over all (untruncated) eigenvalues

    def expanded(self, top: int | None = None) -> np.ndarray:
        """Eigenvalues repeated by multiplicity, descending."""
        ev = np.repeat(self.eigenvalues, self.multiplicities.astype(np.int64))
        ev = np.sort(ev)[::-1]
        return ev if top is None else ev[:top]

    @property
    def total_multiplicity(self) -> int:
        return int(self.multiplicities.sum())

    def rows(self) -> list[dict]:
        return [{"w": int(w), "k": int(k), "eigenvalue": float(e), "multiplicity": int(m)}
                for e, m, w, k in zip(self.eigenvalues, self.multiplicities, self.w, self.k)]


def predict_spectrum(kernel: dpk.DotProductKernel, d: int, n_positions: int,
                     h: PoolingFilter, kmax: int = 30, tol: float = 1e-6) -> MercerSpectrum:
    """|Omega| lambda_0 mu_0 once, then lambda_w mu_k with multiplicity N(d, k)."""
    lc = dpk.legendre_coeffs(kernel, d, kmax)
    if lc.residual > tol:
        warnings.warn(f"kmax={kmax} leaves a reconstruction residual of {lc.residual:.2e}",
                      RuntimeWarning, stacklevel=2)
    lam = filter_spectrum(h, n_positions)
    ev = [n_positions * lam[0] * lc.mu[0]]
    mult, ws, ks = [1], [0], [0]
    for w in range(n_positions):
        for k in range(1, kmax + 1):
            ev.append(lam[w] * lc.mu[k])
            mult.append(dpk.multiplicity(d, k))
            ws.append(w)
            ks.append(k)
    k1 = float(kernel(np.array(1.0)))
    total = n_positions * lam[0] * lc.mu[0] + lam.sum() * (k1 - lc.mu[0])
    return MercerSpectrum(np.array(ev), np.array(mult, dtype=np.float64), np.array(ws),
                          np.array(ks), n_positions, d, float(total))


def degrees_of_freedom(spec: MercerSpectrum, lam: float) -> float:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    e = np.maximum(spec.eigenvalues, 0.0)
    return float(np.sum(spec.multiplicities * e / (lam + e)))


def n_kappa(kernel: dpk.DotProductKernel, d: int, lam: float, kmax: int = 30) -> float:
    """sum_{k >= 1} N(d, k) mu_k / (lam + mu_k)."""
    lc = dpk.legendre_coeffs(kernel, d, kmax)
    mu = np.maximum(lc.mu[1:], 0.0)
    return float(np.sum(lc.multiplicities[1:] * mu / (lam + mu)))


def compare_spectra(predicted: np.ndarray, empirical: np.ndarray, rel_tol: float = 0.15,
                    gap: float = 0.05) -> dict:
    """Rank-wise relative errors and cluster sizes of two descending spectra.

    Clusters are maximal runs whose consecutive relative gaps stay below
    ``gap``; the last predicted cluster is dropped when it is cut by the
    truncation, since its visible size is an artifact of the cut.
    """
    m = min(len(predicted) - 1, len(empirical))
    p, e = np.asarray(predicted[:m]), np.asarray(empirical[:m])
    rel = np.abs(e - p) / np.abs(p)
    pg = _groups(np.asarray(predicted), gap)
    full = []
    pos = 0
    for size in pg:
        if pos + size <= m:
            full.append((pos, size))
        pos += size
    emp_groups = _groups(np.asarray(empirical[:m]), gap)
    return {"max_rel_error": float(rel.max()), "rel_errors": rel.tolist(),
            "predicted_groups": [s for _, s in full], "empirical_groups": emp_groups,
            "values_ok": bool(rel.max() <= rel_tol),
            "multiplicities_ok": _cluster_assignment_ok(p, e, full, rel_tol)}


def _groups(v: np.ndarray, gap: float) -> list[int]:
    sizes = [1]
    for a, b in zip(v[:-1], v[1:]):
        if a > 0 and (a - b) / a <= gap:
            sizes[-1] += 1
        else:
            sizes.append(1)
    return sizes


def _cluster_assignment_ok(p, e, clusters, rel_tol) -> bool:
    """Every predicted cluster is matched by exactly as many empirical values.

    An empirical eigenvalue is assigned to the predicted cluster whose value
    is nearest in log scale; a cluster is reproduced when the count of
    empirical eigenvalues assigned to it equals its predicted multiplicity.
    """
    centers = np.array([np.mean(p[s:s + n]) for s, n in clusters])
    if centers.size == 0:
        return True
    covered = sum(n for _, n in clusters)
    assign = np.argmin(np.abs(np.log(e[:covered, None]) - np.log(centers[None, :])), axis=1)
    counts = np.bincount(assign, minlength=len(clusters))
    return bool(all(c == n for c, (_, n) in zip(counts, clusters)))


# -- trace bounds -------------------------------------------------------------------

def exact_taps(kind: str, n: int) -> list[Fraction]:
    """Dirac or global-average filter on n points with rational taps."""
    if kind in ("dirac", "delta"):
        return [Fraction(1)] + [Fraction(0)] * (n - 1)
    if kind in ("average", "global", "1"):
        return [Fraction(1, n)] * n
    raise ValueError(f"no exact taps for {kind!r}")


def _grid_taps(h, n: int) -> list:
    if isinstance(h, PoolingFilter):
        return [float(t) for t in h.on_grid(n)]
    taps = list(h)
    if len(taps) != n:
        raise ValueError(f"expected {n} taps on the grid, got {len(taps)}")
    return taps


def autocorrelation(h, n: int) -> list:
    """<h, L_r h> = sum_u h[u] h[u - r] for r = 0..n-1 (exact for Fraction taps)."""
    t = _grid_taps(h, n)
    return [sum((t[u] * t[(u - r) % n] for u in range(n)), start=t[0] * 0) for r in range(n)]


def trace_bound_one_layer(kernel: dpk.DotProductKernel, d: int, h, n: int,
                          sigma2_off: float | None = None) -> float:
    """|Omega| sum_r <h, L_r h> sigma_r^2 with sigma_0^2 = kappa(1), sigma_r^2 = E kappa(<z, z'>)."""
    if sigma2_off is None:
        sigma2_off = dpk.sigma_sq_offdiag(kernel, d)
    c = autocorrelation(h, n)
    s0 = float(kernel(np.array(1.0)))
    return n * (float(c[0]) * s0 + sum(float(x) for x in c[1:]) * sigma2_off)


def trace_bound_two_layer(h1, h2, s2_size: int, n: int, eps=0):
    """|S_2|^2 |Omega| (sum_v <h2, L_v h2> <h1, L_v h1>^2 + eps); exact with Fraction inputs."""
    c1 = autocorrelation(h1, n)
    c2 = autocorrelation(h2, n)
    acc = sum((c2[v] * c1[v] ** 2 for v in range(n)), start=c1[0] * 0)
    return s2_size ** 2 * n * (acc + eps)


def two_layer_moments(kernel: dpk.DotProductKernel, d: int) -> dict:
    """Off-diagonal moments of k1 products under independent sphere patches."""
    s = dpk.sigma_sq_offdiag(kernel, d)
    return {"sigma2": s, "sigma4": s * s, "tilde_eps": dpk.tilde_epsilon(kernel, d)}


def krr_bound(norm_fstar: float, trace_term: float, tau2: float, n: int) -> float:
    """||f*|| sqrt(tau^2 E K(x, x) / n), absolute constant set to one."""
    return float(norm_fstar) * math.sqrt(tau2 * float(trace_term) / n)


TABLE_ROWS = (
    # h1, h2, |S2| full?, norm exponent of |Omega| (times ||g||)
    ("dirac", "dirac", True, 1.0),
    ("dirac", "average", True, 1.0),
    ("average", "average", True, 0.5),
    ("average", "dirac", False, 0.5),
)


def table_trace_values(n: int, eps=0) -> list:
    """Exact two-layer trace bounds of the four reference architectures."""
    out = []
    for h1, h2, full, _ in TABLE_ROWS:
        s2 = n if full else 1
        out.append(trace_bound_two_layer(exact_taps(h1, n), exact_taps(h2, n), s2, n, eps))
    return out


def table_bound_exponents(ns: Sequence[int] = (4, 8, 16, 32)) -> list[float]:
    """Fitted exponent of |Omega| in the KRR bound for each reference row (eps = 0, tau = 1)."""
    exps = []
    for i, (_, _, _, ne) in enumerate(TABLE_ROWS):
        b = [krr_bound(n ** ne, table_trace_values(n)[i], 1.0, 1) for n in ns]
        slope = np.polyfit(np.log(ns), np.log(b), 1)[0]
        exps.append(float(slope))
    return exps


# -- architectures ----------------------------------------------------------------

def pooling_by_name(name: str, n: int, s: int = 1) -> PoolingFilter:
    from .domain import gaussian_filter
    if name in ("dirac", "delta"):
        return dirac_filter()
    if name in ("average", "global"):
        return average_filter(n)
    if name == "gaussian":
        return gaussian_filter(s, stride=1)
    raise ValueError(f"unknown pooling {name!r}")


def one_layer_arch(kernel: dpk.DotProductKernel, d: int, n: int, h: PoolingFilter,
                   homogeneous: bool = True) -> ArchSpec:
    """Patch size one on re-channeled signals: each position holds a d-dim patch."""
    return ArchSpec(Grid((n,)), d, (LayerSpec(PatchShape((0,)), kernel, h, homogeneous),))


def two_layer_arch(k1: dpk.DotProductKernel, d: int, n: int, h1: PoolingFilter,
                   h2: PoolingFilter, s2: Sequence[int], k2: dpk.DotProductKernel | None = None
                   ) -> ArchSpec:
    """Quadratic non-homogeneous second layer on top of a patch-size-one first layer."""
    k2 = k2 or dpk.polynomial(2)
    return ArchSpec(Grid((n,)), d, (LayerSpec(PatchShape((0,)), k1, h1, True),
                                    LayerSpec(PatchShape(tuple(s2)), k2, h2, False)))


def table_arch(row: int, kernel: dpk.DotProductKernel, d: int, n: int) -> ArchSpec:
    h1, h2, full, _ = TABLE_ROWS[row]
    s2 = tuple(range(n)) if full else (0,)
    return two_layer_arch(kernel, d, n, pooling_by_name(h1, n), pooling_by_name(h2, n), s2)


def monte_carlo_trace(arch: ArchSpec, n_samples: int, seed: int) -> tuple[float, float]:
    """Mean and standard error of K(x, x) over product-of-spheres samples."""
    ds = gen_product_of_spheres(arch.grid.size, arch.channels, n_samples, seed)
    v = ckmap.self_caches(arch, ds.values).values
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_samples))


# -- synthetic tasks ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """Targets built from a random element g of the patch RKHS.

    ``invariant``: f*(x) = sum_u g(x_u) with g = sum_j beta_j k1(z_j, .).
    ``pairwise``: f*(x) = sum_{u, v} g(x_u, x_v) with
    g(a, b) = sum_j beta_j k1(z_j, a) k1(z'_j, b).
    ``centered`` removes the constant component mu_0 sum_j beta_j from g.
    """

    n_positions: int
    d: int = 3
    kind: str = "invariant"
    kernel: dpk.DotProductKernel = field(default_factory=dpk.exponential)
    n_centers: int = 20
    tau: float = 0.1
    centered: bool = True
    g_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("invariant", "pairwise"):
            raise ValueError(f"unknown task kind {self.kind!r}")

    def _spec(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.g_seed, 7]))
        beta = rng.standard_normal(self.n_centers)
        z = sphere_points(self.n_centers, self.d, self.g_seed, stream=11)
        z2 = sphere_points(self.n_centers, self.d, self.g_seed, stream=13)
        return beta, z, z2

    @property
    def mu0(self) -> float:
        return dpk.sigma_sq_offdiag(self.kernel, self.d)

    def g(self, Z: np.ndarray) -> np.ndarray:
        """g on patches Z of shape (..., d) (invariant kind)."""
        beta, z, _ = self._spec()
        v = self.kernel(dpk.check_cosine(Z @ z.T)) @ beta
        if self.centered:
            v = v - self.mu0 * beta.sum()
        return v

    def g_norm(self) -> float:
        beta, z, z2 = self._spec()
        Kz = self.kernel(dpk.check_cosine(z @ z.T))
        if self.kind == "invariant":
            sq = beta @ Kz @ beta
            if self.centered:
                sq -= self.mu0 * beta.sum() ** 2
            return math.sqrt(max(sq, 0.0))
        Kz2 = self.kernel(dpk.check_cosine(z2 @ z2.T))
        return math.sqrt(max(beta @ (Kz * Kz2) @ beta, 0.0))

    def f_star(self, X: np.ndarray) -> np.ndarray:
        """X of shape (n, |Omega|, d)."""
        if self.kind == "invariant":
            return self.g(X).sum(axis=1)
        beta, z, z2 = self._spec()
        A = self.kernel(dpk.check_cosine(X @ z.T))      # (n, |Omega|, J)
        B = self.kernel(dpk.check_cosine(X @ z2.T))
        return np.einsum("nuj,nvj,j->n", A, B, beta)

    def sample(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = gen_product_of_spheres(self.n_positions, self.d, n, seed).values
        fs = self.f_star(X)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        return X, fs, fs + self.tau * rng.standard_normal(n)


DEFAULT_LAMBDAS = tuple(10.0 ** e for e in range(-9, 1))


def _fit_select(K_tr, y_tr, K_val, y_val, lambdas):
    best = None
    for lam in lambdas:
        try:
            m = krr.fit(K_tr, y_tr, lam)
        except krr.SingularSystemError:
            continue
        err = float(np.mean((krr.predict(m, K_val) - y_val) ** 2))
        if best is None or err < best[0]:
            best = (err, lam, m)
    if best is None:
        raise krr.SingularSystemError("no lambda in the grid gave a solvable system")
    return best[1], best[2]


def run_generalization_experiment(task: SyntheticTask, archs: Mapping[str, ArchSpec],
                                  n_grid: Sequence[int], seeds: Sequence[int],
                                  n_val: int = 200, n_test: int = 1000,
                                  lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> list[dict]:
    """Learning curves: one row per (arch, n, seed) with the test excess risk.

    For each seed one pool of ``max(n_grid)`` training points is drawn and the
    smaller training sets are its prefixes, so one Gram per (arch, seed)
    serves the whole grid.  lambda is picked on a held-out validation set;
    the excess risk is estimated as mean (f_hat - f*)^2 on the test set,
    which equals R(f_hat) - R(f*) in expectation for additive noise.
    """
    for name, arch in archs.items():
        if arch.grid.size != task.n_positions or arch.channels != task.d:
            raise ValueError(f"architecture {name} does not fit the task")
    n_max = max(n_grid)
    rows = []
    for seed in seeds:
        X, fs, y = task.sample(n_max, seed)
        Xv, fv, yv = task.sample(n_val, 10_000 + seed)
        Xt, ft, _ = task.sample(n_test, 20_000 + seed)
        for name, arch in archs.items():
            K = ckmap.gram_matrix(arch, X)
            Kv = ckmap.cross_matrix(arch, Xv, X)
            Kt = ckmap.cross_matrix(arch, Xt, X)
            for n in n_grid:
                lam, m = _fit_select(K[:n, :n], y[:n], Kv[:, :n], yv, lambdas)
                pred = krr.predict(m, Kt[:, :n])
                rows.append({"arch": name, "n": int(n), "seed": int(seed), "lambda": lam,
                             "excess_risk": krr.excess_risk(pred, ft, ft)})
    return rows


def mean_curve(rows: Sequence[dict], arch: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ns = sorted({r["n"] for r in rows if r["arch"] == arch})
    means, stds = [], []
    for n in ns:
        v = [r["excess_risk"] for r in rows if r["arch"] == arch and r["n"] == n]
        means.append(np.mean(v))
        stds.append(np.std(v))
    return np.array(ns), np.array(means), np.array(stds)


def loglog_fit(ns, errs) -> tuple[float, float]:
    """Slope and intercept of log(err) against log(n) over the upper half of the grid."""
    ns, errs = np.asarray(ns, dtype=float), np.asarray(errs, dtype=float)
    half = len(ns) // 2
    sl, ic = np.polyfit(np.log(ns[half:]), np.log(errs[half:]), 1)
    return float(sl), float(ic)


def samples_to_reach(ns, errs, target: float) -> float:
    """Smallest n with err(n) = target by log-log interpolation of a learning curve.

    Targets outside the observed range are extrapolated with the upper-half
    slope fit.
    """
    ns, errs = np.asarray(ns, dtype=float), np.asarray(errs, dtype=float)
    le, ln = np.log(errs), np.log(ns)
    for i in range(len(ns) - 1):
        a, b = le[i], le[i + 1]
        if (a - math.log(target)) * (b - math.log(target)) <= 0 and a != b:
            t = (math.log(target) - a) / (b - a)
            return float(math.exp(ln[i] + t * (ln[i + 1] - ln[i])))
    sl, ic = loglog_fit(ns, errs)
    if sl >= 0:
        return float("inf")
    if math.log(target) > le[0]:
        # target easier than the first point: extrapolate downwards from the low end
        sl0 = (le[1] - le[0]) / (ln[1] - ln[0])
        if sl0 < 0:
            return float(math.exp(ln[0] + (math.log(target) - le[0]) / sl0))
    return float(math.exp((math.log(target) - ic) / sl))


def matched_sample_ratio(ns, err_nopool, err_pool) -> float:
    """n needed without pooling over n needed with pooling, at the error the
    no-pooling curve reaches at its largest n."""
    target = float(err_nopool[-1])
    return float(ns[-1]) / samples_to_reach(ns, err_pool, target)


CURVE_GRID = (25, 50, 100, 200, 400, 800)


def pooling_study(n_positions: Sequence[int] = (4, 8, 16), n_grid: Sequence[int] = CURVE_GRID,
                  seeds: Sequence[int] = range(5), d: int = 3, n_val: int = 200,
                  n_test: int = 1000, tau: float = 0.1) -> tuple[list[dict], dict]:
    """Global-average against no pooling on the translation-invariant task.

    Returns the per-run rows (tagged with ``n_positions``) and, per grid
    size, the matched-sample ratio of the two mean curves.
    """
    k = dpk.exponential()
    rows, ratios = [], {}
    for n_pos in n_positions:
        task = SyntheticTask(n_pos, d=d, kernel=k, tau=tau)
        archs = {"nopool": one_layer_arch(k, d, n_pos, dirac_filter()),
                 "pool": one_layer_arch(k, d, n_pos, average_filter(n_pos))}
        part = run_generalization_experiment(task, archs, n_grid, seeds, n_val, n_test)
        for r in part:
            r["n_positions"] = int(n_pos)
        rows.extend(part)
        ns, e0, _ = mean_curve(part, "nopool")
        _, e1, _ = mean_curve(part, "pool")
        ratios[int(n_pos)] = matched_sample_ratio(ns, e0, e1)
    return rows, ratios
