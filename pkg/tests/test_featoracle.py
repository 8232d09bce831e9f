import numpy as np
import pytest

from convkern import ckmap, dpk, featoracle, verify
from convkern.ckmap import ArchSpec, LayerSpec
from convkern.domain import (Grid, PatchShape, Signal, average_filter, custom_filter,
                             dirac_filter, gaussian_filter, pool, signal_1d)


def poly_arch_2d():
    return ArchSpec(Grid((4, 4)), 2, (
        LayerSpec(PatchShape(((0, 0), (0, 1), (1, 0))), dpk.custom([0.5, 1.0, 0.25]),
                  gaussian_filter(1, rank=2, stride=2), homogeneous=False),
        LayerSpec(PatchShape(((0, 0), (1, 1))), dpk.polynomial(2), average_filter(2, rank=2),
                  homogeneous=False),
    ))


def test_features_reproduce_kernel_2d():
    arch = poly_arch_2d()
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 16, 2)) * 0.4
    F = featoracle.features_batch(arch, X)
    K = ckmap.gram_matrix(arch, X)
    np.testing.assert_allclose(F @ F.T, K, rtol=1e-11, atol=1e-11)
    assert F.shape[1] == featoracle.check_dims(arch)


def test_linear_homogeneous_layer_is_allowed():
    arch = ArchSpec(Grid((4,)), 1, (LayerSpec(PatchShape((0, 1)), dpk.linear(), dirac_filter()),))
    x = np.random.default_rng(1).standard_normal((2, 4, 1))
    F = featoracle.features_batch(arch, x)
    assert abs(F[0] @ F[1] - ckmap.kernel_eval(arch, Signal(arch.grid, x[0]), Signal(arch.grid, x[1]))) < 1e-12


def test_rejects_non_polynomial_and_large():
    arch = ArchSpec(Grid((4,)), 1, (LayerSpec(PatchShape((0,)), dpk.exponential(), dirac_filter()),))
    with pytest.raises(ValueError):
        featoracle.check_dims(arch)
    hom = ArchSpec(Grid((4,)), 1, (LayerSpec(PatchShape((0,)), dpk.polynomial(2), dirac_filter()),))
    with pytest.raises(ValueError):
        featoracle.check_dims(hom)
    big = ArchSpec(Grid((8,)), 2, tuple(
        LayerSpec(PatchShape((-1, 0, 1)), dpk.polynomial(3), dirac_filter(), False) for _ in range(3)))
    with pytest.raises(featoracle.FeatureDimensionError):
        featoracle.check_dims(big)


def test_random_oracle_suite():
    v = verify.oracle_suite(n_cases=40, seed=11)
    assert v["passed"], v["failures"]


def test_min_norm_infeasible():
    arch = ArchSpec(Grid((3,)), 1, (LayerSpec(PatchShape((0,)), dpk.polynomial(2), dirac_filter(), False),))
    x = np.ones((2, 3, 1))
    with pytest.raises(featoracle.InfeasibleError):
        featoracle.min_norm(arch, x, [1.0, 2.0])


def test_min_norm_functional_recovers_vector_in_span():
    arch = ArchSpec(Grid((4,)), 2, (
        LayerSpec(PatchShape((0, 1)), dpk.custom([0.5, 1.0, 0.25]), gaussian_filter(1, stride=2), False),
        LayerSpec(PatchShape((0,)), dpk.polynomial(2), dirac_filter(), False)))
    dim = featoracle.check_dims(arch)
    rng = np.random.default_rng(2)
    S = featoracle.spanning_sample(arch, 3 * dim, seed=4)
    V = featoracle.features_batch(arch, S[:5]).T @ rng.standard_normal(5)
    r = featoracle.min_norm_functional(arch, V, sample=S)
    assert abs(r.norm - np.linalg.norm(V)) < 1e-8 * np.linalg.norm(V)
    with pytest.raises(featoracle.FeatureDimensionError):
        featoracle.min_norm_functional(poly_arch_2d(), np.zeros(featoracle.check_dims(poly_arch_2d())))


@pytest.mark.parametrize("h", [dirac_filter(), average_filter(6), gaussian_filter(1, stride=1)])
def test_invariant_target_norm(h):
    r = verify.prop3_norm_check(6, h, seed=3)
    assert r["rel_error"] < 1e-6


def test_pooling_operator_matches_pool():
    h = custom_filter([-1, 0, 2], [0.2, 0.5, 0.3], stride=2)
    A = featoracle.pooling_operator(h, 8)
    x = np.random.default_rng(5).standard_normal(8)
    np.testing.assert_allclose(A.matrix @ x, pool(signal_1d(x), h).values[:, 0], atol=1e-15)
    np.testing.assert_array_equal(A.adjoint, A.matrix.T)


def test_dft_inverse_matches_svd():
    A = featoracle.pooling_operator(gaussian_filter(1, stride=1), 8)
    assert A.invertible
    np.testing.assert_allclose(A.inverse_dft(), A.pinv(), atol=1e-10)
    np.testing.assert_allclose(A.inverse_dft() @ A.matrix, np.eye(8), atol=1e-10)
    # a 2-tap box vanishes at the Nyquist frequency
    B = featoracle.pooling_operator(average_filter(2), 8)
    assert not B.invertible
    with pytest.raises(ValueError):
        B.inverse_dft()
    P = B.pinv()
    np.testing.assert_allclose(B.matrix @ P @ B.matrix, B.matrix, atol=1e-12)


def test_epq_dirac_single_entry():
    x = np.zeros(8)
    x[2] = 1.0
    for p, q in [(0, 0), (1, 3), (2, 0)]:
        E = featoracle.e_pq_apply(dirac_filter(), p, q, x)
        nz = np.argwhere(E != 0)
        assert nz.tolist() == [[(2 + p) % 8, (2 + q) % 8]]
        assert E[(2 + p) % 8, (2 + q) % 8] == 1.0


def test_epq_brute_force():
    h = gaussian_filter(1, stride=1)
    x = np.random.default_rng(6).standard_normal(6)
    hg = h.on_grid(6)
    for p, q in [(0, 1), (2, 2)]:
        E = featoracle.e_pq_apply(h, p, q, x)
        ref = np.zeros((6, 6))
        for a in range(6):
            for b in range(6):
                ref[a, b] = sum(hg[(w + p - a) % 6] * hg[(w + q - b) % 6] * x[w] for w in range(6))
        np.testing.assert_allclose(E, ref, atol=1e-15)


def test_two_layer_roundtrip_with_channels():
    rng = np.random.default_rng(7)
    h1, h2 = gaussian_filter(1, stride=1), gaussian_filter(1, stride=1)
    F = {(p, q): rng.standard_normal((8, 2, 2)) for p in (0, 1) for q in (0, 1)}
    G = featoracle.prop2_forward(F, h1, h2)
    pen = featoracle.prop2_penalty(G, h1, h2)
    ref = sum(float(np.sum(v ** 2)) for v in F.values())
    assert abs(pen.value - ref) < 1e-6 * ref


def test_penalty_is_min_norm_when_h2_singular():
    rng = np.random.default_rng(8)
    h1, h2 = gaussian_filter(1, stride=1), average_filter(2)
    F = {(0, 1): rng.standard_normal(8)}
    G = featoracle.prop2_forward(F, h1, h2)
    pen = featoracle.prop2_penalty(G, h1, h2)
    assert pen.value <= float(F[(0, 1)] @ F[(0, 1)]) + 1e-9
    # the penalty preimage reproduces G
    A2 = featoracle.pooling_operator(h2, 8)
    Fmin = A2.pinv().T @ (A2.matrix.T @ F[(0, 1)])
    assert abs(pen.value - float(Fmin @ Fmin)) < 1e-9


def test_penalty_rejects_matrices_outside_range():
    G = {(0, 0): np.random.default_rng(9).standard_normal((8, 8))}
    with pytest.raises(featoracle.InfeasibleError):
        featoracle.prop2_penalty(G, gaussian_filter(1, stride=1), gaussian_filter(1, stride=1))
