"""Pure NumPy companion-form scan kernels.

State convention: ``X[:, t]`` is the state *before* consuming ``u[:, t]``, so
``X`` has ``L + 1`` time slices and ``X[:, 0]`` is the initial state.  The
companion matrix has ones on the superdiagonal and the coefficient row ``a``
last; the input vector is the last canonical basis vector.
"""
import numpy as np


def scan_states(a, u, x0=None):
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    B, L, D = u.shape
    n = a.shape[1]
    if a.shape[0] != D:
        raise ValueError("channel mismatch between coefficients and inputs")
    X = np.zeros((B, L + 1, D, n))
    if x0 is not None:
        X[:, 0] = x0
    for t in range(L):
        prev = X[:, t]
        X[:, t + 1, :, :-1] = prev[:, :, 1:]
        X[:, t + 1, :, -1] = np.einsum("bdn,dn->bd", prev, a) + u[:, t]
    return X


def scan_states_backward(a, X, gX):
    a = np.asarray(a, dtype=np.float64)
    B, T, D, n = X.shape
    L = T - 1
    g_a = np.zeros((D, n))
    g_u = np.zeros((B, L, D))
    lam = np.array(gX[:, L], dtype=np.float64)
    for t in range(L, 0, -1):
        top = lam[:, :, -1]
        g_u[:, t - 1] = top
        g_a += np.einsum("bd,bdn->dn", top, X[:, t - 1])
        prev = gX[:, t - 1] + a[None] * top[:, :, None]
        prev[:, :, 1:] += lam[:, :, :-1]
        lam = prev
    return g_a, g_u, lam
