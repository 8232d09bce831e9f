import math
from fractions import Fraction

import numpy as np
import pytest

from convkern import dpk, theory
from convkern.domain import average_filter, dirac_filter, gaussian_filter


def test_filter_spectrum():
    assert np.allclose(theory.filter_spectrum(dirac_filter(), 5), 1.0)
    lam = theory.filter_spectrum(average_filter(4), 4)
    np.testing.assert_allclose(lam, [1, 0, 0, 0], atol=1e-15)
    g = gaussian_filter(1, stride=1)
    # Parseval: sum_w |h_hat|^2 = N ||h||^2
    assert abs(theory.filter_spectrum(g, 8).sum() - 8 * np.sum(g.axis_taps ** 2)) < 1e-14


def test_predicted_spectrum_structure():
    k = dpk.exponential()
    lc = dpk.legendre_coeffs(k, 3, 30)
    sp = theory.predict_spectrum(k, 3, 4, dirac_filter())
    # constant component carries |Omega| mu_0; each (w, k >= 1) carries mu_k with N(3, k) copies
    assert abs(sp.eigenvalues[0] - 4 * lc.mu[0]) < 1e-15
    sel = sp.k == 2
    np.testing.assert_allclose(sp.eigenvalues[sel], lc.mu[2])
    assert np.all(sp.multiplicities[sel] == 5) and sel.sum() == 4
    # the summed spectrum matches the closed-form trace
    assert abs(np.sum(sp.eigenvalues * sp.multiplicities) - sp.total_trace) < 1e-9


@pytest.mark.parametrize("name", ["dirac", "average", "gaussian"])
def test_total_trace_against_monte_carlo(name):
    k = dpk.exponential()
    h = theory.pooling_by_name(name, 4)
    sp = theory.predict_spectrum(k, 3, 4, h)
    mean, se = theory.monte_carlo_trace(theory.one_layer_arch(k, 3, 4, h), 4000, seed=1)
    assert abs(mean - sp.total_trace) < 4 * se + 1e-12


def test_total_trace_closed_forms():
    k = dpk.exponential()
    s2 = dpk.sigma_sq_offdiag(k, 3)
    assert abs(theory.predict_spectrum(k, 3, 6, dirac_filter()).total_trace - 6) < 1e-9
    assert abs(theory.predict_spectrum(k, 3, 6, average_filter(6)).total_trace - (1 + 5 * s2)) < 1e-9
    # the one-layer trace bound is the same expectation
    assert abs(theory.trace_bound_one_layer(k, 3, average_filter(6), 6) - (1 + 5 * s2)) < 1e-9


def test_compare_spectra():
    pred = np.array([4.0, 2, 2, 2, 1, 1, 1, 1, 1, 0.5])
    good = pred[:9] * 1.05
    r = theory.compare_spectra(pred, good)
    assert r["values_ok"] and r["multiplicities_ok"] and r["predicted_groups"] == [1, 3, 5]
    bad = np.array([4.0, 2, 2, 1.4, 1.4, 1, 1, 1, 1])
    assert not theory.compare_spectra(pred, bad)["multiplicities_ok"]
    # a truncated trailing cluster is not counted
    assert theory.compare_spectra(pred, good[:6])["predicted_groups"] == [1, 3]


def test_exact_table_values():
    for n in (2, 3, 4, 8, 16):
        vals = theory.table_trace_values(n)
        assert vals == [Fraction(n) ** 3, Fraction(n) ** 2, Fraction(n), Fraction(1, n)]
        assert all(isinstance(v, Fraction) for v in vals)


def test_table_bound_exponents():
    # norm exponent plus half the trace exponent, minus nothing (n fixed)
    np.testing.assert_allclose(theory.table_bound_exponents(), [2.5, 2.0, 1.0, 0.0], atol=1e-12)


def test_two_layer_bound_against_brute_force():
    h1, h2 = gaussian_filter(1, stride=1), average_filter(3)
    n = 6
    a1 = theory.autocorrelation(h1, n)
    a2 = theory.autocorrelation(h2, n)
    g1, g2 = h1.on_grid(n), h2.on_grid(n)
    for r in range(n):
        assert abs(a1[r] - sum(g1[u] * g1[(u - r) % n] for u in range(n))) < 1e-15
        assert abs(a2[r] - sum(g2[u] * g2[(u - r) % n] for u in range(n))) < 1e-15
    b = theory.trace_bound_two_layer(h1, h2, 2, n, eps=0.1)
    assert abs(b - 4 * n * (sum(a2[v] * a1[v] ** 2 for v in range(n)) + 0.1)) < 1e-12


def test_two_layer_bounds_hold_by_monte_carlo():
    k = dpk.exponential()
    eps = dpk.sigma_sq_offdiag(k, 3)
    for row in range(len(theory.TABLE_ROWS)):
        arch = theory.table_arch(row, k, 3, 4)
        mean, se = theory.monte_carlo_trace(arch, 400, seed=row)
        h1, h2 = arch.layers[0].pooling, arch.layers[1].pooling
        s2 = len(arch.layers[1].patch)
        assert mean - 3 * se <= theory.trace_bound_two_layer(h1, h2, s2, 4, eps)


def test_krr_bound_and_dof():
    assert theory.krr_bound(2.0, 8.0, 0.5, 4) == pytest.approx(2.0)
    sp = theory.predict_spectrum(dpk.exponential(), 3, 4, dirac_filter())
    d1, d2 = theory.degrees_of_freedom(sp, 1e-2), theory.degrees_of_freedom(sp, 1e-4)
    assert 0 < d1 < d2 < sp.total_multiplicity
    with pytest.raises(ValueError):
        theory.degrees_of_freedom(sp, 0.0)
    assert theory.n_kappa(dpk.exponential(), 3, 1e-3) > 0


def test_synthetic_task():
    t = theory.SyntheticTask(4, d=3)
    beta, z, _ = t._spec()
    K = dpk.exponential()(z @ z.T)
    assert abs(t.g_norm() ** 2 - (beta @ K @ beta - t.mu0 * beta.sum() ** 2)) < 1e-10
    X, fs, y = t.sample(2000, seed=0)
    # centering makes E g(z) = 0, so f* averages to zero
    assert abs(fs.mean()) < 4 * fs.std() / math.sqrt(2000)
    assert abs(np.std(y - fs) - t.tau) < 0.01
    X2, fs2, _ = t.sample(2000, seed=0)
    assert np.array_equal(X, X2) and np.array_equal(fs, fs2)
    p = theory.SyntheticTask(4, kind="pairwise")
    assert p.g_norm() > 0 and p.f_star(X[:3]).shape == (3,)
    with pytest.raises(ValueError):
        theory.SyntheticTask(4, kind="other")


def test_curve_helpers():
    ns = np.array([10, 20, 40, 80, 160])
    e0 = 1.0 / ns
    e1 = 0.25 / ns
    sl, _ = theory.loglog_fit(ns, e0)
    assert abs(sl + 1) < 1e-12
    # the pooled curve reaches 1/160 at n = 40
    assert abs(theory.samples_to_reach(ns, e1, 1 / 160) - 40) < 1e-9
    assert abs(theory.matched_sample_ratio(ns, e0, e1) - 4) < 1e-9
    # extrapolation below the grid
    assert abs(theory.samples_to_reach(ns, e1, 0.25 / 5) - 5) < 1e-9


def test_generalization_experiment_small():
    t = theory.SyntheticTask(4, d=3)
    k = dpk.exponential()
    archs = {"pool": theory.one_layer_arch(k, 3, 4, average_filter(4))}
    rows = theory.run_generalization_experiment(t, archs, [10, 40], [0], n_val=30, n_test=50)
    assert len(rows) == 2 and rows[1]["excess_risk"] < rows[0]["excess_risk"]
    with pytest.raises(ValueError):
        theory.run_generalization_experiment(theory.SyntheticTask(5), archs, [10], [0])
