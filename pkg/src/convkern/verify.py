"""Property suites behind ``convkern verify``; each returns a JSON-ready verdict."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ckmap, dpk, featoracle, gram, theory
from .ckmap import ArchSpec, LayerSpec
from .data import gen_product_of_spheres
from .domain import (Grid, PatchShape, Signal, average_filter, custom_filter, dirac_filter,
                     gaussian_filter)

SUITES = ("oracle", "norms", "spectrum", "bounds")


def random_poly_arch(rng: np.random.Generator, max_depth: int = 3, max_positions: int = 8,
                     cap: int = 200_000, max_degree: int = 3) -> ArchSpec:
    """Random polynomial architecture whose explicit features stay below ``cap``."""
    while True:
        depth = int(rng.integers(1, max_depth + 1))
        n = int(rng.choice([m for m in (2, 3, 4, 6, 8) if m <= max_positions]))
        p = int(rng.integers(1, 3))
        boundary = "periodic" if rng.random() < 0.75 else "zero-pad"
        layers = []
        size = n
        for _ in range(depth):
            width = int(rng.integers(1, 3))
            offs = tuple(sorted(rng.choice([-1, 0, 1], size=width, replace=False).tolist()))
            r = int(rng.integers(1, max_degree + 1))
            u = rng.random()
            if u < 0.2:
                kern = dpk.linear()
            elif u < 0.8:
                kern = dpk.polynomial(r)
            else:
                kern = dpk.custom(np.round(rng.uniform(0.1, 1.0, size=r + 1), 3).tolist())
            strides = [s for s in (1, 2) if size % s == 0]
            s = int(rng.choice(strides))
            v = rng.random()
            if v < 0.25:
                h = dirac_filter(s)
            elif v < 0.5:
                h = gaussian_filter(1, stride=s)
            elif v < 0.75:
                h = average_filter(int(rng.integers(1, size + 1)), stride=s)
            else:
                h = custom_filter([-1, 0, 1], rng.uniform(0.1, 1.0, 3), stride=s)
            layers.append(LayerSpec(PatchShape(offs), kern, h, homogeneous=False))
            size //= s
        arch = ArchSpec(Grid((n,), boundary), p, tuple(layers))
        try:
            featoracle.check_dims(arch, cap)
        except featoracle.FeatureDimensionError:
            continue
        return arch


def oracle_suite(n_cases: int = 50, seed: int = 0, inject_fault: bool = False) -> dict:
    """Explicit features against propagated kernel values on random architectures."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for case in range(n_cases):
        arch = random_poly_arch(rng)
        X = rng.standard_normal((2, arch.grid.size, arch.channels)) / math.sqrt(arch.channels)
        F = featoracle.features_batch(arch, X)
        x, y = (Signal(arch.grid, X[i]) for i in range(2))
        K = ckmap.kernel_eval(arch, x, y)
        if inject_fault and case == n_cases // 2:
            K = K * (1 + 1e-6) + 1e-6
        err = abs(float(F[0] @ F[1]) - K) / (1 + abs(K))
        worst = max(worst, err)
        if err > 1e-10:
            failures.append({"case": case, "error": err, "arch": arch.to_dict()})
    return {"suite": "oracle", "passed": not failures, "cases": n_cases,
            "max_scaled_error": worst, "failures": failures[:5]}


def prop3_norm_check(n: int, h, n_centers: int = 5, seed: int = 0) -> dict:
    """min-norm of f*(x) = sum_u g(x_u) against sqrt(|Omega|) ||g|| for kappa(u) = u^2."""
    d = 2
    rng = np.random.default_rng(seed)
    k = dpk.polynomial(2)
    arch = ArchSpec(Grid((n,)), d, (LayerSpec(PatchShape((0,)), k, h, homogeneous=False),))
    Z = rng.standard_normal((n_centers, d))
    beta = rng.standard_normal(n_centers)
    g_norm = math.sqrt(beta @ k(Z @ Z.T) @ beta)
    dim = featoracle.check_dims(arch)
    X = rng.standard_normal((3 * dim + 10, n, d))
    f = (k(X @ Z.T) @ beta).sum(axis=1)
    res = featoracle.min_norm(arch, X, f)
    target = math.sqrt(n) * g_norm
    return {"n": n, "filter": h.kind, "min_norm": res.norm, "expected": target,
            "rel_error": abs(res.norm - target) / target}


def prop2_roundtrip(n: int = 8, offsets=(0, 1, 2), seed: int = 0, h1=None, h2=None) -> dict:
    rng = np.random.default_rng(seed)
    h1 = h1 or gaussian_filter(1, stride=1)
    h2 = h2 or gaussian_filter(1, stride=1)
    F = {(p, q): rng.standard_normal(n) for p in offsets for q in offsets}
    G = featoracle.prop2_forward(F, h1, h2)
    pen = featoracle.prop2_penalty(G, h1, h2)
    ref = sum(float(v @ v) for v in F.values())
    return {"penalty": pen.value, "norm_sq": ref, "rel_error": abs(pen.value - ref) / ref,
            "range_residual": pen.residual}


def norms_suite(seed: int = 0) -> dict:
    checks = []
    for n in (4, 8):
        for h in (dirac_filter(), average_filter(n), gaussian_filter(1, stride=1)):
            checks.append(prop3_norm_check(n, h, seed=seed))
    rt = prop2_roundtrip(seed=seed)
    passed = all(c["rel_error"] <= 1e-6 for c in checks) and rt["rel_error"] <= 1e-6
    return {"suite": "norms", "passed": passed, "prop3": checks, "prop2": rt}


def spectrum_experiment(h_name: str, n: int = 3000, n_positions: int = 4, d: int = 3,
                        seed: int = 0, top: int = 20, sigma: float = 0.6) -> dict:
    k = dpk.exponential(sigma)
    h = theory.pooling_by_name(h_name, n_positions)
    spec = theory.predict_spectrum(k, d, n_positions, h)
    arch = theory.one_layer_arch(k, d, n_positions, h)
    X = gen_product_of_spheres(n_positions, d, n, seed).values
    K = ckmap.gram_matrix(arch, X)
    emp = gram.eigen_decay(K, top) / n
    pred = spec.expanded(top + 1)
    cmp = theory.compare_spectra(pred, emp)
    diag = np.diag(K)
    se = float(diag.std(ddof=1) / math.sqrt(n))
    trace_gap = abs(float(diag.mean()) - spec.total_trace)
    return {"filter": h_name, "predicted": pred[:top].tolist(), "empirical": emp.tolist(),
            "max_rel_error": cmp["max_rel_error"], "values_ok": cmp["values_ok"],
            "multiplicities_ok": cmp["multiplicities_ok"],
            "predicted_groups": cmp["predicted_groups"],
            "trace_mean": float(diag.mean()), "trace_predicted": spec.total_trace,
            "trace_se": se, "trace_ok": trace_gap <= 3 * se + 1e-12,
            "psd_margin": gram.psd_margin(K)}


def spectrum_suite(n: int = 3000, seed: int = 0, out: Path | None = None) -> dict:
    runs = [spectrum_experiment(h, n=n, seed=seed) for h in ("dirac", "average", "gaussian")]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "spectrum.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["filter", "rank", "predicted", "empirical"])
            for r in runs:
                for i, (p, e) in enumerate(zip(r["predicted"], r["empirical"])):
                    wr.writerow([r["filter"], i, repr(p), repr(e)])
    passed = all(r["values_ok"] and r["multiplicities_ok"] and r["trace_ok"] for r in runs)
    return {"suite": "spectrum", "passed": passed, "runs": runs}


def bounds_experiment(n_positions: int = 4, d: int = 3, n: int = 2000, seed: int = 0) -> list[dict]:
    k = dpk.exponential()
    eps = dpk.sigma_sq_offdiag(k, d)
    rows = []
    for i, (h1, h2, full, _) in enumerate(theory.TABLE_ROWS):
        arch = theory.table_arch(i, k, d, n_positions)
        mean, se = theory.monte_carlo_trace(arch, n, seed + i)
        s2 = n_positions if full else 1
        bound = theory.trace_bound_two_layer(arch.layers[0].pooling, arch.layers[1].pooling,
                                             s2, n_positions, eps)
        rows.append({"h1": h1, "h2": h2, "s2": s2, "mc_mean": mean, "mc_se": se,
                     "bound": float(bound), "ok": mean - 3 * se <= bound})
    return rows


def bounds_suite(seed: int = 0, out: Path | None = None) -> dict:
    rows = bounds_experiment(seed=seed)
    exact_ok = True
    for n in (2, 4, 8, 16):
        vals = theory.table_trace_values(n)
        want = [Fraction(n) ** 3, Fraction(n) ** 2, Fraction(n), Fraction(1, n)]
        exact_ok &= vals == want
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bounds.csv", "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return {"suite": "bounds", "passed": exact_ok and all(r["ok"] for r in rows),
            "table_exact": exact_ok, "rows": rows}


def run_suite(name: str, seed: int = 0, out: Path | None = None, inject_fault: bool = False,
              **kw) -> dict:
    if name == "oracle":
        return oracle_suite(seed=seed, inject_fault=inject_fault, **kw)
    if name == "norms":
        return norms_suite(seed=seed)
    if name == "spectrum":
        return spectrum_suite(seed=seed, out=out, **kw)
    if name == "bounds":
        return bounds_suite(seed=seed, out=out)
    raise ValueError(f"unknown suite {name!r}")
