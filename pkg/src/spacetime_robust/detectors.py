"""Runtime attack detectors and false-alarm-rate calibration.

Two detectors are provided:

* :class:`NormDetector` compares received data with forecasts.  In
  ``"average"`` mode the statistic is ``|y_k - ybar_k|`` where ``ybar_k``
  averages the ``h`` forecasts of time ``k`` made at ``k-h, ..., k-1``.  In
  ``"horizon"`` mode it is ``||y_{k-h+1:k} - yhat^{(k-h)}||_2``, the error of
  the forecast whose horizon just completed; this is the quantity the
  gradient attack constrains window by window.
* :class:`AutoencoderDetector` scores the trailing input window by the mean
  squared reconstruction error of a small convolutional autoencoder.

Norm statistics are in domain units; the autoencoder works on scaled data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint
from .autodiff import Tape, mean_squared_error
from .data import RawSeries, Scaler
from .errors import EmptyCalibrationSet, IncompatibleLength, ShapeMismatch, ValidationError
from .training import fit


def statistic_norm(window, prediction_avg) -> float:
    w = np.asarray(window, dtype=np.float64)
    p = np.asarray(prediction_avg, dtype=np.float64)
    if w.shape != p.shape:
        raise ShapeMismatch(f"statistic_norm: shapes {w.shape} and {p.shape} differ")
    return float(np.linalg.norm(w - p))


class PredictionBuffer:
    """Ring of the last ``h`` forecasts, each covering the next ``h`` steps."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self._ring = np.full((horizon, horizon), np.nan)
        self._origins = np.full(horizon, -1, dtype=np.int64)
        self.k = -1

    def push(self, origin: int, forecast) -> None:
        f = np.asarray(forecast, dtype=np.float64)
        if f.shape != (self.horizon,):
            raise ShapeMismatch(f"forecast must have length {self.horizon}")
        slot = origin % self.horizon
        self._ring[slot] = f
        self._origins[slot] = origin
        self.k = origin

    def _forecast_for(self, origin):
        slot = origin % self.horizon
        if origin < 0 or self._origins[slot] != origin:
            return None
        return self._ring[slot]

    def average(self, k: int) -> Optional[float]:
        """``ybar_k``, or None until all ``h`` forecasts covering ``k`` exist."""
        vals = []
        for i in range(1, self.horizon + 1):
            f = self._forecast_for(k - i)
            if f is None:
                return None
            vals.append(f[i - 1])
        return float(np.mean(vals))

    def completed(self, k: int) -> Optional[np.ndarray]:
        """The forecast made at ``k - h`` (covering ``k-h+1 .. k``), if held."""
        return self._forecast_for(k - self.horizon)


# ------------------------------------------------------------ autoencoder

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


@dataclass
class Autoencoder:
    """1-D convolutional autoencoder with a 2-dimensional code.

    encoder: conv(1->8, k3, same) ReLU maxpool2, conv(8->16, k3, same) ReLU
    maxpool2, flatten, affine -> 2.  decoder: affine 2 -> 16 x P/4, ReLU,
    transposed conv(16->8, k4, s2, p1) ReLU, transposed conv(8->1, k4, s2,
    p1).  Inputs are edge-padded to ``P``, the next multiple of 4, and the
    reconstruction is cropped back.
    """

    length: int
    params: dict = field(default_factory=dict)

    NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "enc.w", "enc.b",
             "dec.w", "dec.b", "up1.w", "up1.b", "up2.w", "up2.b")

    @property
    def padded(self) -> int:
        return 4 * math.ceil(self.length / 4)

    def shapes(self):
        q = self.padded // 4
        return {
            "conv1.w": (8, 1, 3), "conv1.b": (8,), "conv2.w": (16, 8, 3), "conv2.b": (16,),
            "enc.w": (16 * q, 2), "enc.b": (2,), "dec.w": (2, 16 * q), "dec.b": (16 * q,),
            "up1.w": (16, 8, 4), "up1.b": (8,), "up2.w": (8, 1, 4), "up2.b": (1,),
        }

    @classmethod
    def init(cls, length: int, seed: int = 0) -> "Autoencoder":
        ae = cls(length)
        rng = np.random.default_rng(seed)
        fan = {"conv1.w": 3, "conv2.w": 24, "enc.w": 16 * (ae.padded // 4), "dec.w": 2,
               "up1.w": 16 * 4 // 2, "up2.w": 8 * 4 // 2}
        for name, shape in ae.shapes().items():
            ae.params[name] = _he(rng, shape, fan[name]) if name in fan else np.zeros(shape)
        return ae

    @classmethod
    def zeros(cls, length: int) -> "Autoencoder":
        ae = cls(length)
        ae.params = {k: np.zeros(s) for k, s in ae.shapes().items()}
        return ae

    # training protocol, shared with SpacetimeModel
    def parameter_names(self):
        return list(self.NAMES)

    def flat_parameters(self):
        return np.concatenate([self.params[k].ravel() for k in self.NAMES])

    def set_flat_parameters(self, vec):
        pos = 0
        for k in self.NAMES:
            shape = self.shapes()[k]
            size = int(np.prod(shape))
            self.params[k] = np.array(vec[pos:pos + size]).reshape(shape)
            pos += size

    def param_nodes(self, tape, requires_grad=True):
        return {k: tape.leaf(self.params[k], requires_grad=requires_grad, name=k) for k in self.NAMES}

    def build(self, tape: Tape, p: dict, x):
        B, L = x.shape
        if L != self.length:
            raise IncompatibleLength(f"autoencoder expects windows of length {self.length}, got {L}")
        P, q = self.padded, self.padded // 4
        h = tape.apply("pad_edge", x, total=P - L)
        h = tape.apply("reshape", h, shape=(B, 1, P))
        h = tape.apply("maxpool2", tape.apply("relu", tape.apply("conv1d", h, p["conv1.w"], p["conv1.b"])))
        h = tape.apply("maxpool2", tape.apply("relu", tape.apply("conv1d", h, p["conv2.w"], p["conv2.b"])))
        code = tape.apply("affine", tape.apply("reshape", h, shape=(B, 16 * q)), p["enc.w"], p["enc.b"])
        h = tape.apply("relu", tape.apply("affine", code, p["dec.w"], p["dec.b"]))
        h = tape.apply("reshape", h, shape=(B, 16, q))
        h = tape.apply("relu", tape.apply("conv_transpose1d", h, p["up1.w"], p["up1.b"]))
        h = tape.apply("conv_transpose1d", h, p["up2.w"], p["up2.b"])
        h = tape.apply("reshape", h, shape=(B, P))
        return tape.apply("crop", h, length=L)

    def reconstruct(self, windows) -> np.ndarray:
        x = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        tape = Tape()
        return self.build(tape, self.param_nodes(tape, False), tape.const(x)).value

    def encode_dim(self) -> int:
        return self.params["enc.b"].shape[0]


def statistic_autoencoder(ae: Autoencoder, window) -> np.ndarray:
    """Mean squared reconstruction error per window (scalar for a single window)."""
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != ae.length:
        raise IncompatibleLength(f"autoencoder expects windows of length {ae.length}, got {x2.shape[1]}")
    z = np.mean((ae.reconstruct(x2) - x2) ** 2, axis=1)
    return float(z[0]) if single else z


def train_autoencoder(ae: Autoencoder, windows, val_windows=None, *, epochs=30, batch_size=64,
                      lr=1e-3, seed=0, patience=5):
    val = None if val_windows is None else (val_windows, val_windows)
    return fit(ae, windows, windows, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
               val=val, loss=mean_squared_error, patience=patience)


# ------------------------------------------------------------ detectors

@dataclass
class NormDetector:
    threshold: float
    mode: str = "horizon"
    kind: str = field(default="norm", init=False)

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValidationError("detector threshold must be >= 0")
        if self.mode not in ("horizon", "average"):
            raise ValidationError(f"unknown norm detector mode {self.mode!r}")

    def window_statistic(self, inputs, predictions, targets, scaler=None) -> np.ndarray:
        """Statistic used inside attack generation: ``||prediction - target||_2`` per window."""
        p = np.atleast_2d(predictions)
        t = np.atleast_2d(targets)
        return np.linalg.norm(p - t, axis=1)


@dataclass
class AutoencoderDetector:
    autoencoder: Autoencoder
    threshold: float
    scaler: Scaler = field(default_factory=Scaler)
    kind: str = field(default="autoencoder", init=False)

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValidationError("detector threshold must be >= 0")

    def window_statistic(self, inputs, predictions=None, targets=None, scaler=None) -> np.ndarray:
        """Reconstruction error of the (domain-unit) input windows."""
        return np.atleast_1d(statistic_autoencoder(self.autoencoder, self.scaler.apply(np.atleast_2d(inputs))))


def calibrate(clean_statistics, alpha: float) -> float:
    """Threshold = empirical lower ``(1 - alpha)``-quantile of clean statistics.

    "Lower" means the smallest sample ``s`` with empirical CDF ``>= 1 - alpha``,
    so at most a fraction ``alpha`` of the calibration samples exceed it.
    """
    z = np.asarray(clean_statistics, dtype=np.float64).ravel()
    if z.size == 0:
        raise EmptyCalibrationSet("calibration needs at least one clean statistic")
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    z = np.sort(z)
    k = max(math.ceil(round((1.0 - alpha) * z.size, 9)) - 1, 0)
    return float(z[k])


@dataclass(frozen=True)
class DetectorEvent:
    k: int
    z: float
    alarm: bool


def stream_statistics(detector, forecaster, stream) -> List[tuple]:
    """``(k, z_k)`` for every step where the statistic is defined.

    ``forecaster`` maps (B, l) domain windows to (B, h) domain forecasts.
    Warm-up steps are skipped rather than reported as zero.
    """
    y = stream.values if isinstance(stream, RawSeries) else np.asarray(stream, dtype=np.float64)
    ell = forecaster.lookback
    if detector.kind == "autoencoder":
        ell = detector.autoencoder.length
        if y.size < ell:
            return []
        X = y[np.arange(ell - 1, y.size)[:, None] + np.arange(-ell + 1, 1)[None, :]]
        z = np.atleast_1d(detector.window_statistic(X))
        return list(zip(range(ell - 1, y.size), z.tolist()))
    h = forecaster.horizon
    if y.size < ell + h:
        return []
    # forecasts at every origin j = l-1 .. n-1 (the last ones only feed the buffer)
    origins = np.arange(ell - 1, y.size)
    X = y[origins[:, None] + np.arange(-ell + 1, 1)[None, :]]
    F = np.atleast_2d(forecaster(X))
    buf = PredictionBuffer(h)
    out = []
    for j, f in zip(origins, F):
        k = int(j)
        if detector.mode == "average":
            ybar = buf.average(k)
            if ybar is not None:
                out.append((k, abs(y[k] - ybar)))
        else:
            done = buf.completed(k)
            if done is not None:
                out.append((k, statistic_norm(y[k - h + 1:k + 1], done)))
        buf.push(k, f)
    return out


def run_detector(detector, forecaster, stream) -> List[DetectorEvent]:
    return [DetectorEvent(k, float(z), bool(z > detector.threshold))
            for k, z in stream_statistics(detector, forecaster, stream)]


def write_events_csv(path, events) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "z", "alarm"])
        for e in events:
            w.writerow([e.k, repr(e.z), int(e.alarm)])


def attacked_step(detector, forecaster, origin: int) -> int:
    """Stream step at which the detector evaluates the forecast issued at ``origin``."""
    return origin if detector.kind == "autoencoder" else origin + forecaster.horizon


def replay_alarm(detector, forecaster, stream, origin: int, perturbation) -> bool:
    """Inject ``perturbation`` on the input window ending at ``origin`` and replay.

    Returns whether the streaming detector alarms at the attacked step.
    """
    y = np.array(stream.values if isinstance(stream, RawSeries) else stream, dtype=np.float64)
    ell = forecaster.lookback
    y[origin - ell + 1:origin + 1] += np.asarray(perturbation, dtype=np.float64)
    k = attacked_step(detector, forecaster, origin)
    if detector.kind == "autoencoder":
        lo = origin - detector.autoencoder.length + 1
    else:
        lo = origin - ell + 1 - forecaster.horizon
    lo = max(lo, 0)
    hi = min(y.size, k + 1)
    events = run_detector(detector, forecaster, y[lo:hi])
    for e in events:
        if e.k + lo == k:
            return e.alarm
    raise ValidationError(f"step {k} is outside the stream or inside the warm-up")


# ------------------------------------------------------------ persistence

def detector_to_doc(detector) -> dict:
    if detector.kind == "norm":
        return checkpoint.dump("norm_detector", {"threshold": detector.threshold, "mode": detector.mode}, {})
    ae = detector.autoencoder
    meta = {"threshold": detector.threshold, "length": ae.length, "scaler": detector.scaler.to_dict()}
    return checkpoint.dump("autoencoder_detector", meta, ae.params)


def detector_from_doc(doc):
    kind = doc.get("kind")
    if kind == "norm_detector":
        meta, _ = checkpoint.parse(doc, kind)
        return NormDetector(float(meta["threshold"]), meta.get("mode", "horizon"))
    meta, tensors = checkpoint.parse(doc, "autoencoder_detector")
    ae = Autoencoder(int(meta["length"]), dict(tensors))
    return AutoencoderDetector(ae, float(meta["threshold"]), Scaler.from_dict(meta["scaler"]))
