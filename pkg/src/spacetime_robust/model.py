"""Simplified Spacetime forecaster built from companion-form SSM banks.

Layout of a forward pass for an input window ``u`` of length ``lookback``::

    embed      X[t, c] = w[c] * u[t] + b[c]
    encoder    per layer: Y = SSM bank (seq-to-seq), Z = MLP(Y), X <- Z + X
    decoder    per channel: consume X, then roll out ``horizon`` steps in
               closed loop, feeding back its own predicted input K z
    project    yhat[i] = sum_c p[c] * out[i, c] + p0

Companion cells use the controllable canonical form: ones on the
superdiagonal, the trainable coefficient row last, input vector ``e_n``.
Encoder cells read their output after the state update (``c x_{t+1}``), so
each encoder is a plain convolution with Markov parameters ``c A^m e_n``.  The
decoder reads the predictor state ``z_{t+1}`` the same way, which makes its
first forecast the one-step-ahead prediction.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .autodiff import Tape
from .data import Scaler
from .errors import NotControllable, ShapeMismatch, ValidationError


# ------------------------------------------------------------ single cells

@dataclass
class CompanionSSM:
    """One SISO companion-form cell.

    ``a`` is the last row of the companion matrix, ``c`` the output row(s).
    ``b`` is always the last canonical basis vector.
    """

    a: np.ndarray
    c: np.ndarray
    state: Optional[np.ndarray] = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).ravel()
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.shape[-1] != self.a.shape[0]:
            raise ShapeMismatch("output row length must equal the state dimension")
        if self.state is None:
            self.state = np.zeros(self.order)

    @property
    def order(self) -> int:
        return self.a.shape[0]

    @property
    def b(self) -> np.ndarray:
        e = np.zeros(self.order)
        e[-1] = 1.0
        return e

    @property
    def A(self) -> np.ndarray:
        return companion_matrix(self.a)

    def reset(self):
        self.state = np.zeros(self.order)

    @classmethod
    def from_ar(cls, phi) -> "CompanionSSM":
        """Cell whose autonomous output obeys ``y_k = sum_i phi_i y_{k-i}``.

        The state is the shift register ``[y_k, ..., y_{k+n-1}]`` so the
        coefficient row is ``phi`` reversed and the output reads the oldest slot.
        """
        phi = np.asarray(phi, dtype=np.float64)
        c = np.zeros_like(phi)
        c[0] = 1.0
        return cls(phi[::-1].copy(), c)


def companion_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    n = a.shape[0]
    A = np.zeros((n, n))
    A[np.arange(n - 1), np.arange(1, n)] = 1.0
    A[-1] = a
    return A


def ssm_scan(cell: CompanionSSM, u, x0=None) -> np.ndarray:
    """Run ``x_{t+1} = A x_t + b u_t`` and return ``y_t = c x_t`` (pre-update).

    The starting state is ``x0`` if given, else ``cell.state``.  The cell is not
    mutated.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    start = cell.state if x0 is None else np.asarray(x0, dtype=np.float64)
    X = kernels.scan_states(cell.a[None, :], u[None, :, None], start[None, None, :])
    return X[0, :-1, 0] @ cell.c.T


# --------------------------------------------------------------- layers

@dataclass
class Mixer:
    """Channel MLP ``W2 gelu(W1 x + b1) + b2`` (row-vector convention)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class EncoderLayer:
    a: np.ndarray  # (D, n) coefficient rows
    c: np.ndarray  # (D, n) output rows
    mixer: Optional[Mixer] = None  # None acts as the identity
    skip: bool = True

    @property
    def order(self):
        return self.a.shape[1]

    def bank(self) -> List[CompanionSSM]:
        return [CompanionSSM(self.a[i], self.c[i]) for i in range(self.a.shape[0])]


@dataclass
class DecoderLayer:
    a: np.ndarray  # (D, n_d)
    c: np.ndarray  # (D, n_d) forecast rows (C-bar)
    k: np.ndarray  # (D, n_d) input-feedback rows (K-bar)

    @property
    def order(self):
        return self.a.shape[1]

    def open_loop(self, channel=0) -> np.ndarray:
        return companion_matrix(self.a[channel])

    def closed_loop(self, channel=0) -> np.ndarray:
        return companion_matrix(self.a[channel] + self.k[channel])


@dataclass
class ModelConfig:
    lookback: int = 84
    horizon: int = 12
    width: int = 8
    encoder_layers: int = 2
    encoder_order: int = 4
    decoder_order: int = 4
    mlp: bool = True

    def validate(self):
        for name in ("lookback", "horizon", "width", "encoder_order", "decoder_order"):
            if getattr(self, name) < 1:
                raise ValidationError(f"model {name} must be >= 1")
        if self.encoder_layers < 0:
            raise ValidationError("encoder_layers must be >= 0")


# ---------------------------------------------------------------- model

@dataclass
class SpacetimeModel:
    embed_w: np.ndarray
    embed_b: np.ndarray
    encoder: List[EncoderLayer]
    decoder: DecoderLayer
    proj_w: np.ndarray
    proj_b: np.ndarray
    lookback: int
    horizon: int
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.embed_w.shape[0]

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SpacetimeModel":
        """Random initialization.

        Coefficient rows are uniform in ``[-0.5/n, 0.5/n]`` (initial spectral
        radius below one with high probability); affine maps are Gaussian with
        variance ``1/fan_in``.
        """
        config.validate()
        rng = np.random.default_rng(seed)
        D, n, nd = config.width, config.encoder_order, config.decoder_order
        layers = []
        for _ in range(config.encoder_layers):
            mixer = None
            if config.mlp:
                mixer = Mixer(rng.normal(0, 1 / np.sqrt(D), (D, D)), np.zeros(D),
                              rng.normal(0, 1 / np.sqrt(D), (D, D)), np.zeros(D))
            layers.append(EncoderLayer(rng.uniform(-0.5 / n, 0.5 / n, (D, n)),
                                       rng.normal(0, 1 / np.sqrt(n), (D, n)), mixer, True))
        dec = DecoderLayer(rng.uniform(-0.5 / nd, 0.5 / nd, (D, nd)),
                           rng.normal(0, 1 / np.sqrt(nd), (D, nd)),
                           rng.normal(0, 0.1 / np.sqrt(nd), (D, nd)))
        return cls(rng.normal(0, 1, D), np.zeros(D), layers, dec,
                   rng.normal(0, 1 / np.sqrt(D), D), np.zeros(()), config.lookback, config.horizon)

    @classmethod
    def decoder_only(cls, a, c, k, lookback, horizon) -> "SpacetimeModel":
        a, c, k = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (a, c, k))
        return cls(np.ones(1), np.zeros(1), [], DecoderLayer(a, c, k), np.ones(1), np.zeros(()),
                   lookback, horizon)

    @classmethod
    def from_ar(cls, phi, lookback: int, horizon: int) -> "SpacetimeModel":
        """Decoder-only model reproducing a noiseless AR(p) process exactly.

        The decoder state is a shift register of the last ``p`` inputs
        (``a = 0``); the forecast row holds the AR coefficients and the
        feedback row equals it, so rollout feeds each prediction back as the
        next input.  Requires ``lookback >= p``.
        """
        phi = np.asarray(phi, dtype=np.float64).ravel()
        if lookback < phi.size:
            raise ValidationError("lookback must cover the AR order")
        c = phi[::-1].copy()
        return cls.decoder_only(np.zeros(phi.size), c, c, lookback, horizon)

    @classmethod
    def from_observer(cls, A, L, C, lookback: int = 1, horizon: int = 1) -> "SpacetimeModel":
        """Decoder-only model realizing the predictor ``x+ = (A - LC) x + L y``.

        ``(A - LC, L)`` is brought to controllable canonical form by the
        similarity ``T = W_c W^{-1}`` built from the two controllability
        matrices.  The feedback row is ``C T^{-1}`` so closed-loop rollout runs
        ``T A T^{-1}``, i.e. multi-step observer predictions.
        """
        from .control import controllability_check

        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        Lg = np.asarray(L, dtype=np.float64).reshape(-1, 1)
        C = np.asarray(C, dtype=np.float64).reshape(1, -1)
        F = A - Lg @ C
        check = controllability_check(F, Lg)
        if not check.controllable:
            raise NotControllable(f"(A - LC, L) has controllability rank {check.rank} < {F.shape[0]}")
        a_c, T = canonical_form(F, Lg.ravel())
        c_c = np.linalg.solve(T.T, C.ravel())
        return cls.decoder_only(a_c, c_c, c_c, lookback, horizon)

    # -- parameters --------------------------------------------------------

    def parameter_names(self) -> List[str]:
        """Depth-first parameter order used by flat vectors and checkpoints."""
        names = ["embed.w", "embed.b"]
        for i, layer in enumerate(self.encoder):
            names += [f"encoder.{i}.a", f"encoder.{i}.c"]
            if layer.mixer is not None:
                names += [f"encoder.{i}.w1", f"encoder.{i}.b1", f"encoder.{i}.w2", f"encoder.{i}.b2"]
        names += ["decoder.a", "decoder.c", "decoder.k", "project.w", "project.b"]
        return names

    def _ref(self, name):
        parts = name.split(".")
        if parts[0] == "embed":
            return self, "embed_" + parts[1]
        if parts[0] == "project":
            return self, "proj_" + parts[1]
        if parts[0] == "decoder":
            return self.decoder, parts[1]
        layer = self.encoder[int(parts[1])]
        if parts[2] in ("a", "c"):
            return layer, parts[2]
        return layer.mixer, parts[2]

    def get(self, name) -> np.ndarray:
        obj, attr = self._ref(name)
        return getattr(obj, attr)

    def set(self, name, value):
        obj, attr = self._ref(name)
        old = getattr(obj, attr)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ShapeMismatch(f"{name}: expected shape {old.shape}, got {value.shape}")
        setattr(obj, attr, value.copy())

    def parameters(self):
        return [(n, self.get(n)) for n in self.parameter_names()]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.parameters()])

    def set_flat_parameters(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for name, p in self.parameters():
            self.set(name, vec[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        if pos != vec.size:
            raise ShapeMismatch(f"flat vector has {vec.size} entries, model has {pos}")

    def param_nodes(self, tape: Tape, requires_grad=True) -> dict:
        return {n: tape.leaf(p, requires_grad=requires_grad, name=n) for n, p in self.parameters()}

    def copy(self) -> "SpacetimeModel":
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------

    def _encode(self, tape, params, u):
        X = tape.apply("embed", u, params["embed.w"], params["embed.b"])
        L = u.shape[1]
        for i, layer in enumerate(self.encoder):
            S = tape.apply("companion_states", params[f"encoder.{i}.a"], X)
            Y = tape.apply("readout", tape.apply("time_slice", S, start=1, stop=L + 1), params[f"encoder.{i}.c"])
            if layer.mixer is not None:
                Hd = tape.apply("gelu", tape.apply("affine", Y, params[f"encoder.{i}.w1"], params[f"encoder.{i}.b1"]))
                Y = tape.apply("affine", Hd, params[f"encoder.{i}.w2"], params[f"encoder.{i}.b2"])
            X = tape.apply("add", Y, X) if layer.skip else Y
        return X

    def build(self, tape: Tape, params: dict, u, horizon: Optional[int] = None):
        """Record the forecast of a (B, L) input batch on ``tape``; returns (B, h)."""
        h = self.horizon if horizon is None else horizon
        X = self._encode(tape, params, u)
        B, L = u.shape
        S = tape.apply("companion_states", params["decoder.a"], X)
        z = tape.apply("time_index", S, t=L)
        a_cl = tape.apply("add", params["decoder.a"], params["decoder.k"])
        roll = tape.apply("companion_states", a_cl, tape.const(np.zeros((B, h - 1, self.width))), z)
        out = tape.apply("readout", roll, params["decoder.c"])
        return tape.apply("project", out, params["project.w"], params["project.b"])

    def forecast(self, inputs) -> np.ndarray:
        """Forecast ``horizon`` steps from one window (l,) or a batch (B, l)."""
        u = np.asarray(inputs, dtype=np.float64)
        single = u.ndim == 1
        if single:
            u = u[None]
        if u.ndim != 2 or u.shape[1] != self.lookback:
            raise ShapeMismatch(f"expected input windows of length {self.lookback}, got shape {np.shape(inputs)}")
        tape = Tape()
        out = self.build(tape, self.param_nodes(tape, requires_grad=False), tape.const(u)).value
        return out[0] if single else out

    def predict_next(self, stream) -> np.ndarray:
        """One-step-ahead predictions over a whole stream, starting from zero state.

        Entry ``k`` predicts ``stream[k + 1]`` from ``stream[:k + 1]``; it equals
        ``forecast`` on a growing window because every window starts at zero
        state.
        """
        u = np.asarray(stream, dtype=np.float64).reshape(1, -1)
        tape = Tape()
        params = self.param_nodes(tape, requires_grad=False)
        X = self._encode(tape, params, tape.const(u)).value
        S = kernels.scan_states(np.ascontiguousarray(self.decoder.a), np.ascontiguousarray(X))
        out = np.einsum("btdn,dn->btd", S[:, 1:], self.decoder.c)
        return (out @ self.proj_w + self.proj_b)[0]

    # -- structure ---------------------------------------------------------

    def is_linearized(self) -> bool:
        return (all(l.mixer is None and not l.skip for l in self.encoder)
                and not np.any(self.embed_b) and not np.any(self.proj_b))

    def spectral_radii(self) -> dict:
        rho = lambda M: float(np.max(np.abs(np.linalg.eigvals(M))))  # noqa: E731
        enc = [rho(companion_matrix(a)) for layer in self.encoder for a in layer.a]
        dec_open = [rho(companion_matrix(a)) for a in self.decoder.a]
        dec_closed = [rho(companion_matrix(a + k)) for a, k in zip(self.decoder.a, self.decoder.k)]
        return {
            "encoder": max(enc) if enc else 0.0,
            "decoder_open": max(dec_open),
            "decoder_closed": max(dec_closed),
        }


def linearize(model: SpacetimeModel) -> SpacetimeModel:
    """Copy of ``model`` with identity mixers, no skips and zero biases.

    The returned input-to-forecast map is exactly linear.
    """
    out = model.copy()
    for layer in out.encoder:
        layer.mixer = None
        layer.skip = False
    out.embed_b = np.zeros_like(out.embed_b)
    out.proj_b = np.zeros_like(out.proj_b)
    return out


def forecast(model: SpacetimeModel, inputs) -> np.ndarray:
    return model.forecast(inputs)


def controllability_matrix(F, g) -> np.ndarray:
    F = np.atleast_2d(F)
    g = np.asarray(g, dtype=np.float64).reshape(F.shape[0], -1)
    blocks = [g]
    for _ in range(F.shape[0] - 1):
        blocks.append(F @ blocks[-1])
    return np.hstack(blocks)


def canonical_form(F, g):
    """Coefficient row and similarity ``T`` with ``T F T^{-1}`` companion, ``T g = e_n``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    n = F.shape[0]
    poly = np.real(np.poly(F))  # z^n + p1 z^{n-1} + ... + pn
    a = -poly[1:][::-1].copy()
    W = controllability_matrix(F, g)
    Wc = controllability_matrix(companion_matrix(a), np.eye(n)[-1])
    T = np.linalg.solve(W.T, Wc.T).T
    return a, T


@dataclass
class ScaledForecaster:
    """A model plus the scaler that maps domain units to model units.

    Calling it maps domain-unit windows to domain-unit forecasts.
    """

    model: SpacetimeModel
    scaler: Scaler

    @property
    def lookback(self):
        return self.model.lookback

    @property
    def horizon(self):
        return self.model.horizon

    def __call__(self, windows) -> np.ndarray:
        return self.scaler.invert(self.model.forecast(self.scaler.apply(windows)))
