"""Closed-form analysis: transfer map, sensitivity bounds, Kalman/observer oracles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import NoConvergence, NotLinearized, NotObservable, Unstable, ValidationError
from .model import SpacetimeModel, companion_matrix, controllability_matrix


# ------------------------------------------------------------ LTI helpers

@dataclass
class LTISystem:
    """``x+ = A x + w``, ``y = C x + v`` with ``w ~ N(0, Sw)``, ``v ~ N(0, Sv)``."""

    A: np.ndarray
    C: np.ndarray
    Sw: np.ndarray
    Sv: float

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        p = self.A.shape[0]
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, p)
        self.Sw = np.asarray(self.Sw, dtype=np.float64).reshape(p, p)
        self.Sv = float(self.Sv)

    @property
    def order(self):
        return self.A.shape[0]

    @classmethod
    def autoregressive(cls, phi, Sw, Sv) -> "LTISystem":
        """AR(p) in the form with the coefficient row first and ``C = e_1``."""
        phi = np.asarray(phi, dtype=np.float64)
        p = phi.size
        A = np.zeros((p, p))
        A[0] = phi
        A[np.arange(1, p), np.arange(p - 1)] = 1.0
        C = np.zeros(p)
        C[0] = 1.0
        return cls(A, C, Sw, Sv)

    def simulate(self, steps: int, rng, x0=None) -> np.ndarray:
        p = self.order
        x = np.zeros(p) if x0 is None else np.asarray(x0, dtype=np.float64)
        chol = np.linalg.cholesky(self.Sw + 1e-300 * np.eye(p)) if np.any(self.Sw) else np.zeros((p, p))
        ys = np.empty(steps)
        for k in range(steps):
            ys[k] = self.C[0] @ x + np.sqrt(self.Sv) * rng.standard_normal()
            x = self.A @ x + chol @ rng.standard_normal(p)
        return ys


def spectral_radius(M) -> float:
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class Controllability:
    controllable: bool
    rank: int
    pbh_uncontrollable_modes: list = field(default_factory=list)

    @property
    def pbh_consistent(self) -> bool:
        return self.controllable == (len(self.pbh_uncontrollable_modes) == 0)


def _rank(M, rel_tol=1e-10) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def controllability_check(A, B) -> Controllability:
    """Rank of ``[B, AB, ..., A^{p-1}B]`` plus a PBH cross-check on each eigenvalue."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    p = A.shape[0]
    B = np.asarray(B, dtype=np.float64).reshape(p, -1)
    rank = _rank(controllability_matrix(A, B))
    bad = []
    for lam in np.linalg.eigvals(A):
        pbh = np.hstack([lam * np.eye(p) - A, B.astype(complex)])
        if _rank(pbh) < p:
            bad.append(complex(lam))
    return Controllability(rank == p, rank, bad)


def observability_check(A, C) -> Controllability:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.asarray(C, dtype=np.float64).reshape(-1, A.shape[0])
    return controllability_check(A.T, C.T)


# ------------------------------------------------------------ Kalman / observer

def riccati_step(P, sys: LTISystem) -> np.ndarray:
    A, C = sys.A, sys.C
    S = (C @ P @ C.T).item() + sys.Sv
    APC = A @ P @ C.T
    return A @ P @ A.T + sys.Sw - (APC @ APC.T) / S


def predictor_riccati(sys: LTISystem, tol=1e-12, max_iter=200_000):
    """Fixed-point iteration of the one-step predictor Riccati map from ``P = Sw``.

    Returns ``(P, iterations)``.  Stops when the Frobenius change drops below
    ``tol * max(1, ||P||_F)``.
    """
    P = sys.Sw.copy()
    for it in range(1, max_iter + 1):
        P_next = riccati_step(P, sys)
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.linalg.norm(P_next - P)
        P = P_next
        if delta <= tol * max(1.0, np.linalg.norm(P)):
            return P, it
    raise NoConvergence(max_iter, float(delta))


def kalman_gain(sys: LTISystem, tol=1e-12, max_iter=200_000) -> np.ndarray:
    """Steady-state one-step predictor gain ``L = A P C^T (C P C^T + Sv)^{-1}``.

    Marginally stable systems (spectral radius exactly one, e.g. AR models
    with a unit root) are accepted; strictly unstable ones raise
    :class:`Unstable`.
    """
    if sys.Sv <= 0:
        raise ValidationError("measurement noise variance must be positive")
    if not observability_check(sys.A, sys.C).controllable:
        raise NotObservable("(A, C) is not observable")
    rho = spectral_radius(sys.A)
    if rho > 1.0 + 1e-9:
        raise Unstable(f"spectral radius {rho:.6g} > 1")
    P, _ = predictor_riccati(sys, tol, max_iter)
    S = (sys.C @ P @ sys.C.T).item() + sys.Sv
    return (sys.A @ P @ sys.C.T).ravel() / S


def simulate_observer(sys: LTISystem, L, y_stream, x0=None) -> np.ndarray:
    """Predictions ``yhat_{k+1} = C xhat_{k+1}`` of the Luenberger predictor.

    Entry ``k`` of the result is the prediction of ``y_stream[k + 1]``.
    """
    A, C = sys.A, sys.C[0]
    L = np.asarray(L, dtype=np.float64).ravel()
    x = np.zeros(sys.order) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    y = np.asarray(y_stream, dtype=np.float64)
    out = np.empty(y.size)
    for k, yk in enumerate(y):
        x = A @ x + L * (yk - C @ x)
        out[k] = C @ x
    return out


def ackermann_observer_gain(A, C, poles) -> np.ndarray:
    """Observer gain placing the eigenvalues of ``A - LC`` at ``poles``.

    Repeated poles are allowed (e.g. all zero for a deadbeat predictor).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    p = A.shape[0]
    C = np.asarray(C, dtype=np.float64).reshape(1, p)
    coeffs = np.real(np.poly(np.asarray(poles)))
    phi_A = np.zeros((p, p))
    for c in coeffs:
        phi_A = phi_A @ A + c * np.eye(p)
    O = np.vstack([C @ np.linalg.matrix_power(A, i) for i in range(p)])
    e = np.zeros(p)
    e[-1] = 1.0
    return phi_A @ np.linalg.solve(O, e)


# ------------------------------------------------------------ transfer map

def encoder_markov(model: SpacetimeModel, length: int) -> np.ndarray:
    """Impulse response ``g[c, m]`` of the (linearized) encoder stack per channel.

    One layer gives ``g_m = c A^m e_n``; stacked layers convolve.  With no
    encoder layers the response is a unit impulse.
    """
    D = model.width
    g = np.zeros((D, length))
    g[:, 0] = 1.0
    for layer in model.encoder:
        for ch in range(D):
            A = companion_matrix(layer.a[ch])
            x = np.zeros(layer.order)
            x[-1] = 1.0
            h = np.empty(length)
            for m in range(length):
                h[m] = layer.c[ch] @ x
                x = A @ x
            g[ch] = np.convolve(g[ch], h)[:length]
    return g


@dataclass
class TransferMap:
    H: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    model: Optional[SpacetimeModel] = None

    @property
    def decoder_dim(self) -> int:
        return self.H2.shape[0]


def build_transfer_map(model: SpacetimeModel, lookback=None, horizon=None) -> TransferMap:
    """Assemble ``H`` with ``H[i, j] = Cb (Ab + Bb Kb)^i sum_{k=j}^{l-1} Ab^{l-1-k} Bb g_{k-j}``.

    For a single encoder layer ``g_m = C A^m B``.  Channels contribute
    additively, weighted by embedding and projection weights; those weights
    are folded into ``H1`` so ``H2`` keeps the plain decoder/encoder form.
    """
    if not model.is_linearized():
        raise NotLinearized("build_transfer_map needs a linearized model (see linearize)")
    ell = model.lookback if lookback is None else lookback
    h = model.horizon if horizon is None else horizon
    D, nd = model.width, model.decoder.order
    g = encoder_markov(model, ell)
    H1 = np.zeros((h, D * nd))
    H2 = np.zeros((D * nd, ell))
    bbar = np.zeros(nd)
    bbar[-1] = 1.0
    for ch in range(D):
        Abar = companion_matrix(model.decoder.a[ch])
        Acl = companion_matrix(model.decoder.a[ch] + model.decoder.k[ch])
        row = model.decoder.c[ch].copy()
        weight = model.proj_w[ch] * model.embed_w[ch]
        for i in range(h):
            H1[i, ch * nd:(ch + 1) * nd] = weight * row
            row = row @ Acl
        # powers[m] = Abar^m bbar
        powers = np.empty((ell, nd))
        v = bbar.copy()
        for m in range(ell):
            powers[m] = v
            v = Abar @ v
        for j in range(ell):
            col = np.zeros(nd)
            for k in range(j, ell):
                col += powers[ell - 1 - k] * g[ch, k - j]
            H2[ch * nd:(ch + 1) * nd, j] = col
    return TransferMap(H1 @ H2, H1, H2, model)


# ------------------------------------------------------------ sensitivity

def _sign_fix(v):
    nz = np.flatnonzero(np.abs(v) > 1e-12 * max(np.max(np.abs(v)), 1e-300))
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def top_singular(H, tol=1e-12, max_iter=100_000):
    """Largest singular value and right singular vector by power iteration on ``H^T H``.

    The start vector is the column of ``H^T H`` with the largest norm (lowest
    index on ties); iteration stops once ``||M v - (v^T M v) v|| <= tol * ||M||``.
    Returns ``(sigma, v, converged)``; the sign is fixed so the first nonzero
    component of ``v`` is positive.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    M = H.T @ H
    n = M.shape[0]
    norms = np.linalg.norm(M, axis=0)
    scale = float(np.max(norms)) if n else 0.0
    if scale == 0.0:
        v = np.zeros(n)
        if n:
            v[0] = 1.0
        return 0.0, v, True
    v = M[:, int(np.argmax(norms))].copy()
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iter):
        w = M @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * scale:
            converged = True
            break
        v = w / np.linalg.norm(w)
    v = _sign_fix(v)
    return float(np.linalg.norm(H @ v)), v, converged


def encoder_zeros(model: SpacetimeModel) -> List[complex]:
    """Transmission zeros of every encoder cell ``c (zI - A)^{-1} e_n``.

    For the companion form the numerator is ``sum_j c_j z^j``.
    """
    zeros = []
    for layer in model.encoder:
        for c in layer.c:
            coeffs = np.trim_zeros(c[::-1], "f")
            if coeffs.size > 1:
                zeros.extend(complex(z) for z in np.roots(coeffs))
    return zeros


@dataclass
class SensitivityReport:
    sigma_max: float
    eps_star: np.ndarray
    h1_norm: float
    l1_lower: float
    l1_upper: float
    dim_bound: float
    rho_encoder: float
    rho_decoder_open: float
    rho_decoder_closed: float
    encoder_zeros: list
    converged: bool = True

    def bounds_hold(self, rtol=1e-12) -> bool:
        slack = rtol * max(1.0, self.sigma_max)
        return (self.l1_lower <= self.sigma_max + slack and self.sigma_max <= self.l1_upper + slack
                and self.sigma_max <= self.dim_bound + slack)

    def to_dict(self) -> dict:
        return {
            "sigma_max": self.sigma_max,
            "eps_star": [float(x) for x in self.eps_star],
            "h1_norm": self.h1_norm,
            "l1_lower": self.l1_lower,
            "l1_upper": self.l1_upper,
            "dim_bound": self.dim_bound,
            "rho_encoder": self.rho_encoder,
            "rho_decoder_open": self.rho_decoder_open,
            "rho_decoder_closed": self.rho_decoder_closed,
            "encoder_zero_magnitudes": sorted((abs(z) for z in self.encoder_zeros), reverse=True),
            "power_iteration_converged": self.converged,
        }


def sensitivity(tm: TransferMap) -> SensitivityReport:
    H = tm.H
    h, ell = H.shape
    sigma, v, conv = top_singular(H)
    l1 = float(np.max(np.sum(np.abs(H), axis=0))) if H.size else 0.0
    s1, _, conv1 = top_singular(tm.H1)
    h2_inf = float(np.max(np.sum(np.abs(tm.H2), axis=1))) if tm.H2.size else 0.0
    radii = {"encoder": 0.0, "decoder_open": 0.0, "decoder_closed": 0.0}
    zeros = []
    if tm.model is not None:
        radii = tm.model.spectral_radii()
        zeros = encoder_zeros(tm.model)
    return SensitivityReport(
        sigma_max=sigma,
        eps_star=v,
        h1_norm=l1,
        l1_lower=l1 / np.sqrt(h),
        l1_upper=np.sqrt(ell) * l1,
        dim_bound=s1 * np.sqrt(tm.decoder_dim) * h2_inf,
        rho_encoder=radii["encoder"],
        rho_decoder_open=radii["decoder_open"],
        rho_decoder_closed=radii["decoder_closed"],
        encoder_zeros=zeros,
        converged=conv and conv1,
    )
