"""Seeded synthetic series used by the experiments and tests."""
from __future__ import annotations

import numpy as np

from .data import RawSeries


def noisy_sine(length: int = 2000, period: float = 50.0, noise: float = 0.1, amplitude: float = 1.0,
               seed: int = 0) -> RawSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    y = amplitude * np.sin(2 * np.pi * t / period) + noise * rng.standard_normal(length)
    return RawSeries(y, name="noisy_sine")


def ar_coefficients_from_roots(roots) -> np.ndarray:
    """``phi`` with ``y_k = sum_i phi_i y_{k-i}`` whose characteristic roots are ``roots``."""
    poly = np.real_if_close(np.poly(roots))
    return -np.real(poly[1:])


def noiseless_ar3(length: int = 2000, period: float = 24.0, level: float = 1.0) -> RawSeries:
    """``sin + constant``: an exact AR(3) with characteristic roots ``e^{+-iw}`` and 1."""
    t = np.arange(length)
    return RawSeries(np.sin(2 * np.pi * t / period) + level, name="noiseless_ar3")


def ar_process(phi, length: int, noise: float = 0.0, seed: int = 0, init=None, burn_in: int = 0) -> RawSeries:
    phi = np.asarray(phi, dtype=np.float64)
    p = len(phi)
    rng = np.random.default_rng(seed)
    y = np.zeros(length + burn_in)
    y[:p] = rng.standard_normal(p) if init is None else init
    e = noise * rng.standard_normal(length + burn_in)
    for k in range(p, length + burn_in):
        y[k] = phi @ y[k - p:k][::-1] + e[k]
    return RawSeries(y[burn_in:], name=f"ar{p}")


def random_stable_ar(p: int, rng, max_radius: float = 0.95) -> np.ndarray:
    """Random real AR(p) coefficients with every root strictly inside ``max_radius``."""
    roots = []
    while len(roots) < p:
        if p - len(roots) >= 2 and rng.random() < 0.5:
            r, th = rng.uniform(0.2, max_radius), rng.uniform(0, np.pi)
            roots += [r * np.exp(1j * th), r * np.exp(-1j * th)]
        else:
            roots.append(rng.uniform(-max_radius, max_radius))
    return ar_coefficients_from_roots(roots)


def electricity_like(length: int = 26304, seed: int = 0) -> RawSeries:
    """Hourly load in kW with daily, weekly and annual cycles plus AR(1) noise.

    The default length covers three years of hourly readings.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    hour, day = t % 24, (t // 24) % 7
    daily = 220 * np.exp(-0.5 * ((hour - 19) / 2.5) ** 2) + 120 * np.exp(-0.5 * ((hour - 8) / 2.0) ** 2) \
        - 90 * np.exp(-0.5 * ((hour - 3.5) / 2.5) ** 2)
    weekly = np.where(day >= 5, -70.0, 0.0)
    annual = 150 * np.cos(2 * np.pi * (t / (24 * 365.25) - 0.05)) + 60 * np.cos(4 * np.pi * t / (24 * 365.25))
    noise = np.zeros(length)
    eps = rng.standard_normal(length) * 25.0
    for k in range(1, length):
        noise[k] = 0.85 * noise[k - 1] + eps[k]
    y = 1000.0 + daily + weekly + annual + noise
    return RawSeries(y, name="electricity_like", frequency="1h")
