import numpy as np
import pytest

from robust_features import _kernels_py, kernels

compiled = pytest.importorskip("robust_features._kernels")


def test_backend_selected():
    assert kernels.BACKEND == "compiled"


def test_bisect_backends_agree(rng):
    for _ in range(50):
        d = rng.integers(1, 20)
        sig = rng.uniform(0.05, 3, d)
        s = rng.uniform(0, 2, (20, d))
        b = rng.uniform(0.01, 2, 20)
        a = _kernels_py.secular_bisect(s, sig, b)
        c = compiled.secular_bisect(s, sig, b)
        assert np.array_equal(a[0], np.asarray(c[0]))
        assert np.array_equal(a[1], np.asarray(c[1]))


def test_bisect_solves(rng):
    sig = np.array([0.5, 1.0, 2.0])
    s = rng.uniform(0.1, 1, (10, 3))
    lam, st = kernels.secular_bisect(s, sig, 0.3)
    assert np.all(st == 0)
    r = lam[:, None] * sig - 1
    np.testing.assert_allclose(np.sum(s / r**2, axis=1), 0.3, rtol=1e-10)


def test_bisect_hard_case_flag():
    lam, st = kernels.secular_bisect(np.array([[0.0, 0.01]]), np.array([1.0, 2.0]), 1.0)
    assert st[0] == 1 and lam[0] == 1.0


@pytest.mark.parametrize("clip", [False, True])
def test_pgd_step_backends_agree(rng, clip):
    for _ in range(20):
        x0 = rng.uniform(0, 1, (30, 5))
        g = rng.normal(size=(30, 5))
        g[3] = 0
        xa, xb = x0 + 0.01, x0 + 0.01
        za = _kernels_py.pgd_step(xa, x0, g, 0.3, 0.5, -1.0, clip)
        zb = compiled.pgd_step(xb, x0, g, 0.3, 0.5, -1.0, clip)
        np.testing.assert_allclose(xa, xb, rtol=0, atol=1e-15)
        assert np.array_equal(np.asarray(za, bool), np.asarray(zb, bool))
        assert za[3]
