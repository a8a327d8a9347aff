import numpy as np
import pytest

from spacetime_robust import kernels
from spacetime_robust.model import companion_matrix

BACKENDS = kernels.available_backends()


def _reference_states(a, u, x0):
    """Explicit matrix recursion x+ = A x + e_n u, one channel at a time."""
    B, L, D = u.shape
    n = a.shape[1]
    X = np.zeros((B, L + 1, D, n))
    X[:, 0] = x0
    b = np.zeros(n)
    b[-1] = 1.0
    for d in range(D):
        A = companion_matrix(a[d])
        for i in range(B):
            for t in range(L):
                X[i, t + 1, d] = A @ X[i, t, d] + b * u[i, t, d]
    return X


@pytest.mark.parametrize("backend", BACKENDS)
def test_scan_matches_matrix_recursion(backend):
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.4, (3, 4))
    u = rng.normal(size=(2, 9, 3))
    x0 = rng.normal(size=(2, 3, 4))
    X = kernels.get_backend(backend).scan_states(a, u, x0)
    assert np.allclose(X, _reference_states(a, u, x0), atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_backward_is_adjoint_of_forward(backend):
    # <gX, dX> must equal <g_a, da> + <g_u, du> + <g_x0, dx0> for the linearized scan
    rng = np.random.default_rng(1)
    k = kernels.get_backend(backend)
    a = rng.normal(0, 0.3, (2, 3))
    u = rng.normal(size=(2, 7, 2))
    x0 = rng.normal(size=(2, 2, 3))
    X = k.scan_states(a, u, x0)
    gX = rng.normal(size=X.shape)
    ga, gu, gx0 = k.scan_states_backward(a, X, gX)
    eps = 1e-6
    da, du, dx0 = rng.normal(size=a.shape), rng.normal(size=u.shape), rng.normal(size=x0.shape)
    Xp = k.scan_states(a + eps * da, u + eps * du, x0 + eps * dx0)
    Xm = k.scan_states(a - eps * da, u - eps * du, x0 - eps * dx0)
    lhs = np.sum(gX * (Xp - Xm)) / (2 * eps)
    rhs = np.sum(ga * da) + np.sum(gu * du) + np.sum(gx0 * dx0)
    assert lhs == pytest.approx(rhs, rel=1e-7)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.4, (8, 4))
    u = rng.normal(size=(16, 84, 8))
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    Xp, Xc = py.scan_states(a, u), cy.scan_states(a, u)
    assert np.allclose(Xp, Xc, rtol=1e-12, atol=1e-12)
    gX = rng.normal(size=Xp.shape)
    for gp, gc in zip(py.scan_states_backward(a, Xp, gX), cy.scan_states_backward(a, Xc, gX)):
        assert np.allclose(gp, gc, rtol=1e-11, atol=1e-11)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
    assert kernels.BACKEND in BACKENDS
