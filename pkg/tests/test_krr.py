import numpy as np
import pytest

from convkern import gram, krr


def psd(n, rank=None, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, rank or n))
    return A @ A.T


def test_fit_matches_direct_solve():
    K = psd(40, seed=1)
    y = np.random.default_rng(2).standard_normal(40)
    m = krr.fit(K, y, 1e-3)
    ref = np.linalg.solve(K + 40 * 1e-3 * np.eye(40), y)
    np.testing.assert_allclose(m.alpha, ref, rtol=1e-9)
    assert m.residual < 1e-12


def test_objective_is_minimized():
    # alpha minimizes (1/n)||y - K a||^2 + lam a^T K a
    K = psd(25, seed=3)
    y = np.random.default_rng(4).standard_normal(25)
    lam = 0.01
    a = krr.fit(K, y, lam).alpha

    def obj(v):
        r = y - K @ v
        return r @ r / 25 + lam * v @ K @ v

    rng = np.random.default_rng(5)
    for _ in range(10):
        assert obj(a) <= obj(a + 1e-4 * rng.standard_normal(25)) + 1e-15


def test_cg_path_agrees(monkeypatch):
    K = psd(60, seed=6)
    y = np.random.default_rng(7).standard_normal((60, 2))
    direct = krr.fit(K, y, 1e-2).alpha
    monkeypatch.setattr(krr, "CG_THRESHOLD", 10)
    viacg = krr.fit(K, y, 1e-2).alpha
    np.testing.assert_allclose(viacg, direct, rtol=1e-7, atol=1e-9)


def test_singular_kernel_with_zero_lambda_uses_jitter():
    K = psd(20, rank=3, seed=8)
    y = K @ np.ones(20)
    m = krr.fit(K, y, 0.0)
    np.testing.assert_allclose(K @ m.alpha, y, rtol=1e-4, atol=1e-6)


def test_validation():
    with pytest.raises(ValueError):
        krr.fit(np.eye(3), np.ones(3), -1.0)
    with pytest.raises(ValueError):
        krr.fit(np.eye(3), np.ones(4), 0.1)
    m = krr.fit(np.eye(3), np.ones(3), 0.1)
    with pytest.raises(ValueError):
        krr.predict(m, np.ones((2, 4)))


def test_onevsall_and_classify():
    rng = np.random.default_rng(9)
    X = np.concatenate([rng.normal(-2, 0.3, (20, 2)), rng.normal(2, 0.3, (20, 2)),
                        rng.normal((2, -2), 0.3, (20, 2))])
    lab = np.repeat([3, 5, 7], 20)
    K = np.exp(-((X[:, None] - X[None]) ** 2).sum(-1))
    m = krr.fit_onevsall(K, lab, 1e-4)
    assert m.classes.tolist() == [3, 5, 7]
    T = krr.onevsall_targets(lab, m.classes)
    assert set(np.unique(T)) == {0.9, -0.1}
    pred = krr.classify(m, K)
    assert krr.accuracy(pred, lab) == 1.0
    assert krr.per_class_accuracy(pred, lab, m.classes) == {3: 1.0, 5: 1.0, 7: 1.0}
    with pytest.raises(ValueError):
        krr.fit_onevsall(K, np.zeros(60, int), 1e-4)


def test_fingerprint_checks():
    g = gram.GramMatrix(psd(5), 11, 22, 8, None)
    m = krr.fit(g, np.ones(5), 0.1)
    assert (m.arch_fp, m.data_fp) == (11, 22)
    krr.predict(m, gram.CrossGram(np.ones((2, 5)), 11, 22, 33))
    with pytest.raises(ValueError):
        krr.predict(m, gram.CrossGram(np.ones((2, 5)), 11, 99, 33))
    with pytest.raises(ValueError):
        krr.predict(m, gram.CrossGram(np.ones((2, 5)), 12, 22, 33))


def test_excess_risk():
    f = np.array([1.0, 2.0, 3.0])
    y = f + np.array([0.1, -0.1, 0.0])
    assert krr.excess_risk(f, y, f) == 0.0
    # with y = f* the estimate is the mean squared distance to the target
    assert abs(krr.excess_risk(f + 1, f, f) - 1.0) < 1e-15


def test_model_roundtrip(tmp_path):
    K = psd(12, seed=10)
    for y in (np.arange(12.0), np.arange(12) % 3):
        m = krr.fit(K, y, 1e-2) if y.dtype.kind == "f" else krr.fit_onevsall(K, y, 1e-2)
        krr.save_model(tmp_path / "m", m)
        r = krr.load_model(tmp_path / "m")
        assert np.array_equal(r.alpha, m.alpha) and r.lam == m.lam
        assert (r.classes is None) == (m.classes is None)
    with pytest.raises(ValueError):
        (tmp_path / "bad").write_bytes(bytes(64))
        krr.load_model(tmp_path / "bad")
