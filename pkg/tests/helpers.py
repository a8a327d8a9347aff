"""Independent oracles shared by the tests."""
import numpy as np


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def fd_check(f, x, g, h=1e-5) -> float:
    """Normwise relative error ``max|g - fd| / max|fd|``."""
    fd = central_fd(f, x, h)
    g = np.zeros_like(fd) if g is None else np.asarray(g, dtype=np.float64)
    scale = max(float(np.max(np.abs(fd))) if fd.size else 0.0, 1e-12)
    return float(np.max(np.abs(g - fd))) / scale if fd.size else 0.0


def transfer_matrix(model):
    """Forecasts of the unit basis inputs, stacked as columns."""
    return model.forecast(np.eye(model.lookback)).T


def direct_ar(phi, history, steps):
    """Iterate ``y_k = sum_i phi_i y_{k-i}`` forward from ``history``."""
    y = list(history)
    for _ in range(steps):
        y.append(sum(p * y[-1 - i] for i, p in enumerate(phi)))
    return np.array(y[len(history):])
