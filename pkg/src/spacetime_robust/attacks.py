"""Attack generation and adversarial fine-tuning.

Gradient attacks iterate in the forecaster's scaled units (``step_size`` is a
normalized step) while perturbations, clipping levels, norm budgets and
detector statistics are reported in domain units.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import error_norm, grad, mean_squared_error
from .data import SeriesWindow
from .errors import DetectorViolatedAtInit, Infeasible, ValidationError, ZeroInput
from .model import ScaledForecaster
from .training import Adam

MODES = ("detector", "clip", "budget")
ZERO_GRAD_TOL = 1e-12


@dataclass
class AttackConfig:
    """``mode``: ``detector`` stops at the detector threshold, ``clip`` keeps
    every coordinate of ``a`` in ``[-clip, clip]``, ``budget`` projects ``a``
    onto the l2 ball of radius ``budget``.  The last two ignore the detector
    while iterating.
    """

    step_size: float = 1e-2
    max_iters: int = 100
    mode: str = "detector"
    clip: Optional[float] = None
    budget: Optional[float] = None

    def validate(self):
        if not self.step_size > 0:
            raise ValidationError("step_size must be > 0")
        if self.max_iters < 0:
            raise ValidationError("max_iters must be >= 0")
        if self.mode not in MODES:
            raise ValidationError(f"unknown attack mode {self.mode!r}")
        if self.mode == "clip" and not (self.clip is not None and self.clip >= 0):
            raise ValidationError("clip mode needs clip >= 0")
        if self.mode == "budget" and not (self.budget is not None and self.budget >= 0):
            raise ValidationError("budget mode needs budget >= 0")
        return self


@dataclass
class AttackOutcome:
    perturbation: np.ndarray
    adv_prediction: np.ndarray
    clean_prediction: np.ndarray
    iterations_used: int
    stealthy: bool
    statistic_trace: list = field(default_factory=list)
    zero_gradient: bool = False
    status: str = "ok"

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.perturbation))

    def to_dict(self, target=None) -> dict:
        d = {
            "perturbation": [float(x) for x in self.perturbation],
            "norm": self.norm,
            "adv_prediction": [float(x) for x in self.adv_prediction],
            "clean_prediction": [float(x) for x in self.clean_prediction],
            "iterations_used": int(self.iterations_used),
            "stealthy": bool(self.stealthy),
            "statistic_trace": [float(x) for x in self.statistic_trace],
            "zero_gradient": bool(self.zero_gradient),
            "status": self.status,
        }
        if target is not None:
            t = np.asarray(target, dtype=np.float64)
            d["clean_mae"] = float(np.mean(np.abs(self.clean_prediction - t)))
            d["adv_mae"] = float(np.mean(np.abs(self.adv_prediction - t)))
        return d


@dataclass
class BatchAttackResult:
    """Row ``i`` describes the attack on input window ``i``."""

    perturbations: np.ndarray
    adv_predictions: np.ndarray
    clean_predictions: np.ndarray
    iterations: np.ndarray
    stealthy: np.ndarray
    zero_gradient: np.ndarray
    status: list
    traces: list

    def __len__(self):
        return len(self.perturbations)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.perturbations, axis=1)

    def outcome(self, i: int) -> AttackOutcome:
        return AttackOutcome(self.perturbations[i], self.adv_predictions[i], self.clean_predictions[i],
                             int(self.iterations[i]), bool(self.stealthy[i]), list(self.traces[i]),
                             bool(self.zero_gradient[i]), self.status[i])


def _project(a, cfg: AttackConfig, scale: float):
    if cfg.mode == "clip":
        c = cfg.clip / scale
        return np.clip(a, -c, c)
    if cfg.mode == "budget":
        r = cfg.budget / scale
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return np.where(n > r, a * (r / np.where(n > 0, n, 1.0)), a)
    return a


def _statistic(detector, forecaster, x_dom, p_dom, t_dom):
    return np.atleast_1d(detector.window_statistic(x_dom, p_dom, t_dom))


def pgd_batch(forecaster: ScaledForecaster, inputs, targets, cfg: AttackConfig, detector=None) -> BatchAttackResult:
    """Normalized gradient ascent on ``||f(y + a) - target||_2`` for every row.

    In detector mode a candidate whose detector statistic exceeds the
    threshold is rejected and that row stops at its previous iterate.  Rows
    whose clean window already alarms get ``status="violated_at_init"`` and
    ``a = 0``.
    """
    cfg.validate()
    if cfg.mode == "detector" and detector is None:
        raise ValidationError("detector mode needs a detector")
    model, sc = forecaster.model, forecaster.scaler
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    B = len(x)
    u, yt = sc.apply(x), sc.apply(y)
    a = np.zeros_like(u)
    clean = forecaster(x)
    status = ["ok"] * B
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    zero_grad = np.zeros(B, dtype=bool)
    traces = [[] for _ in range(B)]
    if detector is not None:
        z0 = _statistic(detector, forecaster, x, clean, y)
        for i in range(B):
            traces[i].append(float(z0[i]))
        if cfg.mode == "detector":
            bad = ~(z0 <= detector.threshold)
            active &= ~bad
            for i in np.flatnonzero(bad):
                status[i] = "violated_at_init"
    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = grad(error_norm, model, u[idx] + a[idx], yt[idx], wrt_params=False).wrt_input
        gn = np.linalg.norm(g, axis=1)
        flat = gn < ZERO_GRAD_TOL
        if flat.any():
            zero_grad[idx[flat]] = True
            for i in idx[flat]:
                status[i] = "zero_gradient"
            active[idx[flat]] = False
            idx, g, gn = idx[~flat], g[~flat], gn[~flat]
            if idx.size == 0:
                break
        cand = _project(a[idx] + cfg.step_size * g / gn[:, None], cfg, sc.scale)
        if detector is not None:
            xd = sc.invert(u[idx] + cand)
            z = _statistic(detector, forecaster, xd, forecaster(xd), y[idx])
            if cfg.mode == "detector":
                ok = z <= detector.threshold
                for i in idx[~ok]:
                    status[i] = "stopped_at_threshold"
                active[idx[~ok]] = False
                idx, cand, z = idx[ok], cand[ok], z[ok]
            for i, zi in zip(idx, z):
                traces[i].append(float(zi))
        a[idx] = cand
        iters[idx] += 1
    pert = a * sc.scale
    adv = forecaster(x + pert)
    if detector is not None:
        zf = _statistic(detector, forecaster, x + pert, adv, y)
        stealthy = zf <= detector.threshold
        stealthy[np.array([s == "violated_at_init" for s in status], dtype=bool)] = False
    else:
        stealthy = np.zeros(B, dtype=bool)
    return BatchAttackResult(pert, adv, clean, iters, stealthy, zero_grad, status, traces)


def pgd_attack(forecaster: ScaledForecaster, window: SeriesWindow, cfg: AttackConfig, detector=None) -> AttackOutcome:
    """Single-window gradient attack; raises if the clean window already alarms."""
    res = pgd_batch(forecaster, window.input[None], window.target[None], cfg, detector)
    if res.status[0] == "violated_at_init":
        raise DetectorViolatedAtInit(f"clean window at origin {window.origin_index} already alarms")
    return res.outcome(0)


def attack_with_norms(forecaster: ScaledForecaster, inputs, targets, norms, cfg: AttackConfig) -> BatchAttackResult:
    """Fresh gradient attacks whose l2 norms equal ``norms`` exactly.

    Each row runs budget-mode ascent with its own radius and the result is
    rescaled onto the sphere, so two models can be compared at identical
    attack norms.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    norms = np.asarray(norms, dtype=np.float64)
    rows = []
    for i in range(len(x)):
        c = AttackConfig(cfg.step_size, cfg.max_iters, "budget", budget=float(norms[i]))
        rows.append(pgd_batch(forecaster, x[i:i + 1], y[i:i + 1], c))
    pert = np.concatenate([r.perturbations for r in rows])
    n = np.linalg.norm(pert, axis=1)
    pert = np.where(n[:, None] > 0, pert * (norms / np.where(n > 0, n, 1.0))[:, None], pert)
    adv = forecaster(x + pert)
    return BatchAttackResult(pert, adv, np.concatenate([r.clean_predictions for r in rows]),
                             np.concatenate([r.iterations for r in rows]), np.zeros(len(x), dtype=bool),
                             np.concatenate([r.zero_gradient for r in rows]),
                             [s for r in rows for s in r.status], [t for r in rows for t in r.traces])


# ------------------------------------------------------------ data-driven attack

@dataclass
class DDAParams:
    """``slack`` defaults to 5% of the detector threshold; ``branch`` is
    ``plus``, ``minus`` or ``auto`` (the root closest to the clean input norm)."""

    gamma: float
    beta: float = 1.0
    slack: Optional[float] = None
    branch: str = "auto"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("gamma must be > 0")
        if not 0 < self.beta <= 1:
            raise ValidationError("beta must lie in (0, 1]")
        if self.slack is not None and not self.slack > 0:
            raise ValidationError("slack must be > 0")
        if self.branch not in ("plus", "minus", "auto"):
            raise ValidationError(f"unknown branch {self.branch!r}")

    def slack_for(self, threshold: float) -> float:
        return 0.05 * threshold if self.slack is None else self.slack


def dda_roots(target_norm: float, threshold: float, params: DDAParams):
    """Both candidate input norms ``(plus, minus)``.

    With forecast norm ``gamma * r`` at cosine ``beta`` to the target, the
    output error equals ``threshold - slack`` exactly when ``r`` is one of
    these roots.
    """
    s = params.slack_for(threshold)
    mu = (threshold - s) ** 2
    disc = target_norm ** 2 * (params.beta ** 2 - 1.0) + mu
    if disc < 0:
        raise Infeasible(f"(threshold - slack)^2 = {mu:.6g} < ||y_o||^2 (1 - beta^2) = {mu - disc:.6g}")
    r = math.sqrt(disc)
    return ((params.beta * target_norm + r) / params.gamma, (params.beta * target_norm - r) / params.gamma)


def dda_target_norm(input_norm: float, target_norm: float, threshold: float, params: DDAParams) -> float:
    plus, minus = dda_roots(target_norm, threshold, params)
    if params.branch == "plus":
        return plus
    if params.branch == "minus":
        return minus
    return plus if abs(plus - input_norm) <= abs(minus - input_norm) else minus


def dda_attack(window: SeriesWindow, detector, params: DDAParams, target_norm_estimate: Optional[float] = None,
               forecaster=None) -> AttackOutcome:
    """Rescale the input along its own direction to the stealth-boundary norm.

    Construction uses no model access.  When ``forecaster`` is given it is
    queried once afterwards only to report predictions and the stealth flag.
    """
    if not math.isfinite(detector.threshold):
        raise Infeasible("the data-driven attack needs a finite threshold")
    y_i = np.asarray(window.input, dtype=np.float64)
    ni = float(np.linalg.norm(y_i))
    if ni == 0.0:
        raise ZeroInput("input window is identically zero; direction undefined")
    no = float(np.linalg.norm(window.target)) if target_norm_estimate is None else float(target_norm_estimate)
    r = dda_target_norm(ni, no, detector.threshold, params)
    adv_input = y_i * (r / ni)
    pert = adv_input - y_i
    h = len(window.target)
    if forecaster is None:
        nan = np.full(h, np.nan)
        return AttackOutcome(pert, nan, nan.copy(), 0, False, [], status="unverified")
    clean = forecaster(y_i[None])[0]
    adv = forecaster(adv_input[None])[0]
    z = float(_statistic(detector, forecaster, adv_input[None], adv[None], window.target[None])[0])
    return AttackOutcome(pert, adv, clean, 0, bool(z <= detector.threshold), [z])


def dda_batch(forecaster, inputs, targets, detector, params: DDAParams) -> BatchAttackResult:
    """Data-driven attack on every row; rows failing the feasibility condition get status ``infeasible``."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    outs = []
    for i in range(len(x)):
        try:
            outs.append(dda_attack(SeriesWindow(x[i], y[i], i), detector, params, forecaster=forecaster))
        except Infeasible:
            # window skipped: no perturbation, reported with its own status
            clean = forecaster(x[i][None])[0]
            outs.append(AttackOutcome(np.zeros_like(x[i]), clean, clean.copy(), 0, False, [],
                                      status="infeasible"))
    return BatchAttackResult(np.array([o.perturbation for o in outs]), np.array([o.adv_prediction for o in outs]),
                             np.array([o.clean_prediction for o in outs]), np.zeros(len(x), dtype=np.int64),
                             np.array([o.stealthy for o in outs]), np.zeros(len(x), dtype=bool),
                             [o.status for o in outs], [o.statistic_trace for o in outs])


def estimate_gamma_beta(inputs, targets, forecaster=None, max_queries: int = 256):
    """``gamma`` = mean ``||y_o|| / ||y_i||``; ``beta`` = 1 unless a forecaster
    is supplied, in which case it is the mean cosine between forecast and
    target over at most ``max_queries`` windows (forward queries only)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(x) == 0:
        raise ValidationError("estimate_gamma_beta needs at least one window")
    ni = np.linalg.norm(x, axis=1)
    keep = ni > 0
    gamma = float(np.mean(np.linalg.norm(y[keep], axis=1) / ni[keep]))
    if forecaster is None:
        return gamma, 1.0
    sel = np.linspace(0, len(x) - 1, min(max_queries, len(x))).round().astype(int)
    p = forecaster(x[sel])
    denom = np.linalg.norm(p, axis=1) * np.linalg.norm(y[sel], axis=1)
    ok = denom > 0
    beta = float(np.mean(np.sum(p[ok] * y[sel][ok], axis=1) / denom[ok]))
    return gamma, min(max(beta, np.finfo(float).tiny), 1.0)


# ------------------------------------------------------------ adversarial fine-tuning

@dataclass
class FinetuneHistory:
    clean_loss: list = field(default_factory=list)
    adv_loss: list = field(default_factory=list)
    attacked: list = field(default_factory=list)


def adversarial_finetune(forecaster: ScaledForecaster, inputs, targets, detector, cfg: AttackConfig, *,
                         batch: int = 64, iters: int = 10, lr: float = 1e-3, steps_per_iter: int = 1,
                         seed: int = 0):
    """Alternate attack generation on ``batch`` sampled windows with Adam
    updates on the MSE between adversarial-input forecasts and clean targets.

    Returns ``(new_forecaster, history)``; the input forecaster is untouched.
    Windows whose clean input already alarms are skipped.
    """
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    f = ScaledForecaster(forecaster.model.copy(), forecaster.scaler)
    sc = f.scaler
    opt = Adam(lr)
    hist = FinetuneHistory()
    for _ in range(iters):
        idx = rng.choice(len(x), size=min(batch, len(x)), replace=False)
        res = pgd_batch(f, x[idx], y[idx], cfg, detector)
        keep = np.array([s != "violated_at_init" for s in res.status], dtype=bool)
        hist.attacked.append(int(keep.sum()))
        if not keep.any():
            continue
        u_adv = sc.apply(x[idx][keep] + res.perturbations[keep])
        t = sc.apply(y[idx][keep])
        for _ in range(steps_per_iter):
            g = grad(mean_squared_error, f.model, u_adv, t, wrt_input=False)
            f.model.set_flat_parameters(opt.step(f.model.flat_parameters(), g.wrt_params))
        hist.adv_loss.append(float(np.mean((f(x[idx][keep] + res.perturbations[keep]) - y[idx][keep]) ** 2)))
        hist.clean_loss.append(float(np.mean((f(x[idx]) - y[idx]) ** 2)))
    return f, hist


# ------------------------------------------------------------ serialization

def outcomes_to_json(path, result: BatchAttackResult, targets=None, extra: Optional[dict] = None) -> None:
    rows = []
    for i in range(len(result)):
        rows.append(result.outcome(i).to_dict(None if targets is None else targets[i]))
    Path(path).write_text(json.dumps({"attacks": rows, **(extra or {})}, indent=1))


def outcomes_to_csv(path, result: BatchAttackResult, targets, origins=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "origin", "norm", "clean_mae", "adv_mae", "iterations", "stealthy", "status"])
        for i in range(len(result)):
            t = np.asarray(targets[i])
            w.writerow([i, "" if origins is None else int(origins[i]), repr(float(result.norms[i])),
                        repr(float(np.mean(np.abs(result.clean_predictions[i] - t)))),
                        repr(float(np.mean(np.abs(result.adv_predictions[i] - t)))),
                        int(result.iterations[i]), int(result.stealthy[i]), result.status[i]])
