"""Experiment pipelines shared by the CLI and the acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import attacks as atk
from . import control
from .config import ExperimentConfig
from .data import RawSeries, chronological_split, fit_scaler, load_csv, window_arrays
from .detectors import (Autoencoder, AutoencoderDetector, NormDetector, calibrate, replay_alarm,
                        stream_statistics, train_autoencoder)
from .errors import NotControllable, SpacetimeRobustError
from .model import ModelConfig, ScaledForecaster, SpacetimeModel, linearize
from .synthetic import ar_process, electricity_like, noiseless_ar3, noisy_sine
from .training import fit

log = logging.getLogger(__name__)

AR3_PHI = (0.3, 0.5, 0.2)
REFERENCE_GAIN = (0.16, 0.20, 0.17)
STABLE_AR3_PHI = (0.5, -0.3, 0.2)


# ------------------------------------------------------------ data

def load_series(cfg: ExperimentConfig) -> RawSeries:
    d = cfg.dataset
    if d.path:
        return load_csv(d.path, d.column)
    n = d.length
    if d.synthetic == "electricity":
        return electricity_like(n or 26304, seed=cfg.seed)
    if d.synthetic == "noisy_sine":
        return noisy_sine(n or 2000, seed=cfg.seed)
    if d.synthetic == "noiseless_ar3":
        return noiseless_ar3(n or 2000)
    return ar_process(STABLE_AR3_PHI, n or 4000, noise=0.1, seed=cfg.seed, burn_in=100)


@dataclass
class Windows:
    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray


@dataclass
class Prepared:
    series: RawSeries
    split: object
    scaler: object
    train: Windows
    val: Windows
    test: Windows


def _windows(series, ell, h) -> Windows:
    return Windows(*window_arrays(series, ell, h))


def subsample(n: int, limit: Optional[int]) -> np.ndarray:
    """Evenly spaced indices keeping at most ``limit`` of ``n`` items."""
    if limit is None or n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def prepare(cfg: ExperimentConfig, full_data: bool = False) -> Prepared:
    series = load_series(cfg)
    split = chronological_split(series, tuple(cfg.dataset.split))
    scaler = fit_scaler(split.train, cfg.dataset.scaler)
    ell, h = cfg.model.lookback, cfg.model.horizon
    tr = _windows(split.train, ell, h)
    keep = subsample(len(tr.inputs), None if full_data else cfg.dataset.max_train_windows)
    tr = Windows(tr.inputs[keep], tr.targets[keep], tr.origins[keep])
    return Prepared(series, split, scaler, tr, _windows(split.val, ell, h), _windows(split.test, ell, h))


def stratified_indices(n: int, k: int, seed: int) -> np.ndarray:
    """One index drawn uniformly from each of ``k`` equal strata of ``range(n)``."""
    k = min(k, n)
    edges = np.linspace(0, n, k + 1)
    rng = np.random.default_rng(seed)
    lo, hi = np.ceil(edges[:-1]).astype(int), np.ceil(edges[1:]).astype(int)
    return np.array([rng.integers(a, max(b, a + 1)) for a, b in zip(lo, hi)])


# ------------------------------------------------------------ metrics

def forecast_metrics(pred, target) -> dict:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    err = p - t
    nz = np.abs(t) > 1e-9
    mape = float(np.mean(np.abs(err[nz]) / np.abs(t[nz])) * 100) if nz.any() else float("nan")
    return {"mae": float(np.mean(np.abs(err))), "mse": float(np.mean(err ** 2)), "mape": mape}


@dataclass
class MetricsReport:
    clean_mae: float
    clean_mse: float
    clean_mape: float
    adv_mae: Optional[float] = None
    adv_mse: Optional[float] = None
    attack_norm: Optional[float] = None
    adv_mae_per_norm: Optional[float] = None
    alarms: Optional[int] = None
    stealthy: Optional[int] = None
    n: int = 0
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def attack_metrics(result: atk.BatchAttackResult, targets, alarms=None, origins=None) -> MetricsReport:
    clean = forecast_metrics(result.clean_predictions, targets)
    adv = forecast_metrics(result.adv_predictions, targets)
    norm = float(np.mean(result.norms))
    records = []
    for i in range(len(result)):
        records.append({
            "origin": None if origins is None else int(origins[i]),
            "norm": float(result.norms[i]),
            "clean_mae": float(np.mean(np.abs(result.clean_predictions[i] - targets[i]))),
            "adv_mae": float(np.mean(np.abs(result.adv_predictions[i] - targets[i]))),
            "iterations": int(result.iterations[i]),
            "stealthy": bool(result.stealthy[i]),
            "status": result.status[i],
        })
    return MetricsReport(clean["mae"], clean["mse"], clean["mape"], adv["mae"], adv["mse"], norm,
                         adv["mae"] / norm if norm > 0 else float("inf"), alarms,
                         int(np.sum(result.stealthy)), len(result), records)


# ------------------------------------------------------------ training / detectors

def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.lookback, m.horizon, m.width, m.encoder_layers, m.encoder_order, m.decoder_order, m.mlp)


def train_forecaster(cfg: ExperimentConfig, prep: Prepared):
    model = SpacetimeModel.init(model_config(cfg), seed=cfg.seed)
    sc = prep.scaler
    o = cfg.optimizer
    hist = fit(model, sc.apply(prep.train.inputs), sc.apply(prep.train.targets), epochs=o.epochs,
               batch_size=o.batch_size, lr=o.lr, seed=cfg.seed,
               val=(sc.apply(prep.val.inputs), sc.apply(prep.val.targets)), patience=o.patience)
    return ScaledForecaster(model, sc), hist


def evaluate(forecaster, windows: Windows) -> dict:
    return forecast_metrics(forecaster(windows.inputs), windows.targets)


def detector_statistics(detector, forecaster, series) -> np.ndarray:
    return np.array([z for _, z in stream_statistics(detector, forecaster, series)])


def build_detector(cfg: ExperimentConfig, forecaster, prep: Prepared):
    """Train (if needed) and calibrate the configured detector on the validation span."""
    d = cfg.detector
    if d.kind == "norm":
        det = NormDetector(0.0, d.mode)
    else:
        ell = forecaster.lookback
        ae = Autoencoder.init(ell, seed=cfg.seed)
        sc = forecaster.scaler
        tr = prep.train.inputs[subsample(len(prep.train.inputs), d.ae_max_windows)]
        train_autoencoder(ae, sc.apply(tr), sc.apply(prep.val.inputs), epochs=d.ae_epochs,
                          batch_size=cfg.optimizer.batch_size, lr=cfg.optimizer.lr, seed=cfg.seed)
        det = AutoencoderDetector(ae, 0.0, sc)
    if d.threshold is not None:
        det.threshold = float(d.threshold)
    else:
        det.threshold = calibrate(detector_statistics(det, forecaster, prep.split.val), d.alpha)
    return det


def false_alarm_rate(detector, forecaster, series) -> float:
    z = detector_statistics(detector, forecaster, series)
    return float(np.mean(z > detector.threshold)) if z.size else float("nan")


# ------------------------------------------------------------ attacks

def attack_config(cfg: ExperimentConfig, **over) -> atk.AttackConfig:
    a = cfg.attack
    kw = dict(step_size=a.step_size, max_iters=a.max_iters, mode=a.mode, clip=a.clip, budget=a.budget)
    kw.update(over)
    return atk.AttackConfig(**kw)


def evaluation_indices(cfg: ExperimentConfig, prep: Prepared) -> np.ndarray:
    return stratified_indices(len(prep.test.inputs), cfg.attack.n_windows, cfg.seed)


def audit(detector, forecaster, series, origins, result: atk.BatchAttackResult) -> int:
    """Replay every stealthy-flagged attack through the streaming detector; count alarms."""
    alarms = 0
    for i in np.flatnonzero(result.stealthy):
        alarms += int(replay_alarm(detector, forecaster, series, int(origins[i]), result.perturbations[i]))
    return alarms


def run_attacks(cfg: ExperimentConfig, forecaster, detector, prep: Prepared, idx=None, method=None,
                acfg: Optional[atk.AttackConfig] = None):
    idx = evaluation_indices(cfg, prep) if idx is None else idx
    X, Y, O = prep.test.inputs[idx], prep.test.targets[idx], prep.test.origins[idx]
    method = method or cfg.attack.method
    if method == "dda":
        gamma, beta = atk.estimate_gamma_beta(prep.train.inputs, prep.train.targets)
        if cfg.attack.beta is not None:
            beta = cfg.attack.beta
        res = atk.dda_batch(forecaster, X, Y, detector, atk.DDAParams(gamma, beta, cfg.attack.slack))
    else:
        res = atk.pgd_batch(forecaster, X, Y, acfg or attack_config(cfg), detector)
    alarms = audit(detector, forecaster, prep.split.test, O, res)
    return attack_metrics(res, Y, alarms, O), res


def run_finetune(cfg: ExperimentConfig, forecaster, detector, prep: Prepared):
    """Adversarial fine-tuning plus an equal-norm before/after comparison."""
    acfg = attack_config(cfg)
    f = cfg.finetune
    tuned, hist = atk.adversarial_finetune(forecaster, prep.train.inputs, prep.train.targets, detector, acfg,
                                           batch=f.batch, iters=f.iters, lr=f.lr,
                                           steps_per_iter=f.steps_per_iter, seed=cfg.seed)
    idx = evaluation_indices(cfg, prep)
    X, Y = prep.test.inputs[idx], prep.test.targets[idx]
    base = atk.pgd_batch(forecaster, X, Y, acfg, detector)
    norms = base.norms
    fresh = attack_config(cfg, mode="budget", budget=0.0)
    before = atk.attack_with_norms(forecaster, X, Y, norms, fresh)
    after = atk.attack_with_norms(tuned, X, Y, norms, fresh)
    report = {
        "clean_before": evaluate(forecaster, prep.test),
        "clean_after": evaluate(tuned, prep.test),
        "before": attack_metrics(before, Y).to_dict(),
        "after": attack_metrics(after, Y).to_dict(),
        "attack_norms": [float(x) for x in norms],
        "history": asdict(hist),
    }
    return tuned, report


# ------------------------------------------------------------ analysis

def analyze(model: SpacetimeModel) -> dict:
    lin = model if model.is_linearized() else linearize(model)
    tm = control.build_transfer_map(lin)
    rep = control.sensitivity(tm)
    out = rep.to_dict()
    out["bounds_hold"] = bool(rep.bounds_hold())
    out["auto_linearized"] = lin is not model
    return out


def kalman_check(phi=AR3_PHI, Sw=1e-2, Sv=0.1, steps: int = 200, seed: int = 0, random_systems: int = 20) -> dict:
    """Steady-state Kalman predictor versus the equivalent decoder-only forecaster."""
    def one(sys, rng):
        L = control.kalman_gain(sys)
        y = sys.simulate(steps, rng)
        ref = control.simulate_observer(sys, L, y)
        row = {"gain": [float(v) for v in L.ravel()]}
        if not np.any(L):
            row.update(controllable_A_L=False, controllable_closed=False, max_diff=0.0, passed=True,
                       note="zero gain: predictor runs open loop")
            return row
        row["controllable_A_L"] = control.controllability_check(sys.A, L.reshape(-1, 1)).controllable
        row["controllable_closed"] = control.controllability_check(sys.A - L.reshape(-1, 1) @ sys.C,
                                                                   L.reshape(-1, 1)).controllable
        try:
            pred = SpacetimeModel.from_observer(sys.A, L, sys.C).predict_next(y)
            row["max_diff"] = float(np.max(np.abs(pred - ref)))
        except NotControllable as exc:
            row["max_diff"] = float("nan")
            row["note"] = str(exc)
        row["passed"] = bool(row["controllable_A_L"] and row["controllable_closed"] and row["max_diff"] <= 1e-8)
        return row

    rng = np.random.default_rng(seed)
    sys = control.LTISystem.autoregressive(phi, Sw * np.eye(len(phi)), Sv)
    main = one(sys, rng)
    main["reference_gain"] = list(REFERENCE_GAIN) if tuple(phi) == AR3_PHI else None
    if main["reference_gain"] is not None:
        dev = np.abs(np.array(main["gain"]) - np.array(REFERENCE_GAIN))
        main["gain_within_0.01"] = bool(np.all(dev <= 0.01))
    main["spectral_radius"] = control.spectral_radius(sys.A)
    zero = one(control.LTISystem.autoregressive(phi, np.zeros((len(phi), len(phi))), Sv), rng)
    rand = []
    for _ in range(random_systems):
        n = int(rng.integers(2, 6))
        while True:
            A = rng.normal(size=(n, n))
            A *= rng.uniform(0.3, 0.95) / control.spectral_radius(A)
            C = rng.normal(size=(1, n))
            if control.observability_check(A, C).controllable:
                break
        s = control.LTISystem(A, C, np.diag(rng.uniform(0.01, 1.0, n)), float(rng.uniform(0.05, 1.0)))
        try:
            rand.append(one(s, rng))
        except SpacetimeRobustError as exc:
            rand.append({"passed": False, "note": str(exc)})
    return {"ar3": main, "zero_process_noise": zero, "random": rand,
            "random_passed": sum(r["passed"] for r in rand)}


# ------------------------------------------------------------ spectral-radius sweeps

H_SWEEP_BANDS = {"encoder": (1.0378, 1.0614), "decoder_closed": (0.9978, 1.0027)}
L_SWEEP_BANDS = {"encoder": (0.8742, 0.9274), "decoder_closed": (1.0921, 1.1631)}


def coefficient_radius(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.max(np.abs(np.roots(np.r_[1.0, -a[::-1]]))))


def clamp_radius(a, lo: float, hi: float) -> np.ndarray:
    """Rescale all roots of a coefficient row so its spectral radius lies in ``[lo, hi]``.

    Scaling every root by ``s`` multiplies the coefficient of ``z^j`` by
    ``s^(n-j)``.
    """
    a = np.asarray(a, dtype=np.float64)
    r = coefficient_radius(a)
    if r == 0.0:
        return a.copy()
    s = min(max(r, lo), hi) / r
    return a * s ** (a.size - np.arange(a.size))


def radius_projector(bands: dict):
    """``post_step`` hook keeping a linear model inside the given radius bands."""
    def project(model: SpacetimeModel):
        model.embed_b = np.zeros_like(model.embed_b)
        model.proj_b = np.zeros_like(model.proj_b)
        if "encoder" in bands:
            for layer in model.encoder:
                for d in range(len(layer.a)):
                    layer.a[d] = clamp_radius(layer.a[d], *bands["encoder"])
        if "decoder_closed" in bands:
            dec = model.decoder
            for d in range(len(dec.a)):
                dec.k[d] = clamp_radius(dec.a[d] + dec.k[d], *bands["decoder_closed"]) - dec.a[d]
    return project


@dataclass
class SweepPoint:
    lookback: int
    horizon: int
    decoder_order: int
    adversarial_error: float
    sigma_max: float
    clean_mse: float
    rho_encoder: float
    rho_decoder_closed: float
    rho_decoder_open: float
    encoder_zero_max: float

    def to_dict(self):
        return asdict(self)


def sine_point(lookback: int, horizon: int, *, decoder_order: int = 4, encoder_order: int = 4,
               bands: Optional[dict] = None, seed: int = 0, epochs: int = 30, lr: float = 5e-3,
               length: int = 2000, period: float = 50.0, noise: float = 0.1, eval_stride: int = 10,
               budget: float = 1.0) -> SweepPoint:
    """Train one linear single-channel model on the noisy sine and attack it.

    The adversarial error is the mean test-window ``||f(y + a) - y_o||_2``
    under gradient attacks with ``||a||_2 <= budget``.
    """
    split = chronological_split(noisy_sine(length, period=period, noise=noise, seed=0))
    cfg = ModelConfig(lookback, horizon, 1, 1, encoder_order, decoder_order, False)
    model = linearize(SpacetimeModel.init(cfg, seed))
    hook = radius_projector(bands or {})
    hook(model)
    X, Y, _ = window_arrays(split.train, lookback, horizon)
    fit(model, X, Y, epochs=epochs, lr=lr, seed=seed, post_step=hook)
    Xt, Yt, _ = window_arrays(split.test, lookback, horizon)
    Xe, Ye = Xt[::eval_stride], Yt[::eval_stride]
    f = ScaledForecaster(model, fit_scaler(split.train, "identity"))
    res = atk.pgd_batch(f, Xe, Ye, atk.AttackConfig(0.1, 50, "budget", budget=budget))
    rep = control.sensitivity(control.build_transfer_map(model))
    radii = model.spectral_radii()
    zeros = [abs(z) for z in rep.encoder_zeros]
    return SweepPoint(lookback, horizon, decoder_order,
                      float(np.mean(np.linalg.norm(res.adv_predictions - Ye, axis=1))), rep.sigma_max,
                      float(np.mean((f(Xt) - Yt) ** 2)), radii["encoder"], radii["decoder_closed"],
                      radii["decoder_open"], max(zeros) if zeros else float("nan"))


def lookback_sweep(lookbacks=(4, 8, 12, 16, 24, 32), horizon: int = 8, **kw):
    return [sine_point(ell, horizon, bands=L_SWEEP_BANDS, **kw) for ell in lookbacks]


def horizon_sweep(horizons=(2, 4, 6, 8, 10, 12), lookback: int = 16, **kw):
    return [sine_point(lookback, h, bands=H_SWEEP_BANDS, **kw) for h in horizons]


def decoder_order_sweep(orders=(2, 3, 6), lookback: int = 3, horizon: int = 10, epochs: int = 40, **kw):
    return [sine_point(lookback, horizon, decoder_order=nd, epochs=epochs, **kw) for nd in orders]


def within_bands(points, bands: dict, tol: float = 1e-9) -> bool:
    for p in points:
        for key, (lo, hi) in bands.items():
            r = getattr(p, "rho_" + key)
            if not lo - tol <= r <= hi + tol:
                return False
    return True


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y)[0])
