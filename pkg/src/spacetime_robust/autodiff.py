"""Minimal reverse-mode differentiation over the model's primitive operations.

A :class:`Tape` records primitive applications in execution order (which is a
topological order by construction).  Each primitive is a pair of pure
functions registered in :data:`PRIMITIVES`::

    forward(*input_values, **attrs) -> (output_value, ctx)
    backward(ctx, grad_output, *input_values, **attrs) -> tuple of input grads

``None`` in the returned tuple means "no gradient for that input".  All arrays
are float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import UnregisteredPrimitive

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: Dict[str, Primitive] = {}


def register(name):
    def deco(cls_or_pair):
        fwd, bwd = cls_or_pair()
        PRIMITIVES[name] = Primitive(name, fwd, bwd)
        return cls_or_pair
    return deco


class Node:
    __slots__ = ("value", "grad", "op", "inputs", "ctx", "attrs", "requires_grad", "name")

    def __init__(self, value, op=None, inputs=(), ctx=None, attrs=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


class Tape:
    """Records a forward computation for one reverse sweep."""

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def leaf(self, value, requires_grad=True, name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), requires_grad=requires_grad, name=name)
        self.leaves.append(node)
        return node

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise UnregisteredPrimitive(f"primitive {op!r} is not registered")
        value, ctx = prim.forward(*(i.value for i in inputs), **attrs)
        node = Node(value, op, inputs, ctx, attrs, any(i.requires_grad for i in inputs))
        self.nodes.append(node)
        return node

    def backward(self, out: Node, seed=None) -> None:
        for n in self.leaves:
            n.grad = None
        for n in self.nodes:
            n.grad = None
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is None or not node.requires_grad:
                continue
            prim = PRIMITIVES[node.op]
            grads = prim.backward(node.ctx, node.grad, *(i.value for i in node.inputs), **node.attrs)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g

    def replay(self) -> bool:
        """Recompute every node from the leaves; True if all values match bit-for-bit."""
        fresh = {}
        for node in self.nodes:
            vals = [fresh.get(id(i), i.value) for i in node.inputs]
            value, _ = PRIMITIVES[node.op].forward(*vals, **node.attrs)
            if not np.array_equal(value, node.value):
                return False
            fresh[id(node)] = value
        return True


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

@register("add")
def _add():
    def fwd(x, y):
        return x + y, None

    def bwd(ctx, g, x, y):
        return _unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y))
    return fwd, bwd


@register("sub")
def _sub():
    def fwd(x, y):
        return x - y, None

    def bwd(ctx, g, x, y):
        return _unbroadcast(g, np.shape(x)), -_unbroadcast(g, np.shape(y))
    return fwd, bwd


@register("mul")
def _mul():
    def fwd(x, y):
        return x * y, None

    def bwd(ctx, g, x, y):
        return _unbroadcast(g * y, np.shape(x)), _unbroadcast(g * x, np.shape(y))
    return fwd, bwd


@register("scale")
def _scale():
    def fwd(x, factor):
        return x * factor, None

    def bwd(ctx, g, x, factor):
        return (g * factor,)
    return fwd, bwd


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@register("gelu")
def _gelu():
    def fwd(x):
        return gelu(x), None

    def bwd(ctx, g, x):
        return (g * gelu_grad(x),)
    return fwd, bwd


@register("relu")
def _relu():
    def fwd(x):
        return np.maximum(x, 0.0), None

    def bwd(ctx, g, x):
        return (g * (x > 0),)
    return fwd, bwd


@register("square")
def _square():
    def fwd(x):
        return x * x, None

    def bwd(ctx, g, x):
        return (2.0 * g * x,)
    return fwd, bwd


@register("sum")
def _sum():
    def fwd(x):
        return np.asarray(np.sum(x)), None

    def bwd(ctx, g, x):
        return (np.full(np.shape(x), float(g)),)
    return fwd, bwd


@register("mean")
def _mean():
    def fwd(x):
        return np.asarray(np.mean(x)), None

    def bwd(ctx, g, x):
        return (np.full(np.shape(x), float(g) / np.size(x)),)
    return fwd, bwd


@register("row_norm")
def _row_norm():
    # Euclidean norm over the last axis; the subgradient at 0 is taken as 0.
    def fwd(x):
        n = np.sqrt(np.sum(x * x, axis=-1))
        return n, n

    def bwd(ctx, g, x):
        safe = np.where(ctx > 0, ctx, 1.0)
        return (np.where(ctx[..., None] > 0, x / safe[..., None], 0.0) * g[..., None],)
    return fwd, bwd


# ---------------------------------------------------------------- linear maps

@register("affine")
def _affine():
    def fwd(x, W, b):
        return x @ W + b, None

    def bwd(ctx, g, x, W, b):
        gx = g @ W.T
        gW = np.tensordot(x, g, axes=(tuple(range(x.ndim - 1)), tuple(range(g.ndim - 1))))
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gW, gb
    return fwd, bwd


@register("embed")
def _embed():
    # (B, L) scalars -> (B, L, D) channels
    def fwd(u, w, b):
        return u[..., None] * w + b, None

    def bwd(ctx, g, u, w, b):
        return g @ w, np.einsum("bl,bld->d", u, g), g.sum(axis=(0, 1))
    return fwd, bwd


@register("project")
def _project():
    # (B, T, D) channels -> (B, T) scalars
    def fwd(x, w, b):
        return x @ w + b, None

    def bwd(ctx, g, x, w, b):
        return g[..., None] * w, np.einsum("bt,btd->d", g, x), np.asarray(g.sum())
    return fwd, bwd


@register("reshape")
def _reshape():
    def fwd(x, shape):
        return np.reshape(x, shape), None

    def bwd(ctx, g, x, shape):
        return (np.reshape(g, np.shape(x)),)
    return fwd, bwd


# ------------------------------------------------------- companion recurrence

@register("companion_states")
def _companion_states():
    """States of ``x_{t+1} = A(a) x_t + e_n u_t`` for every channel.

    Inputs: ``a`` (D, n), ``u`` (B, L, D) and optionally ``x0`` (B, D, n).
    Output: states (B, L + 1, D, n) with slice 0 the initial state.
    """
    def fwd(a, u, x0=None):
        X = kernels.scan_states(np.ascontiguousarray(a), np.ascontiguousarray(u), x0)
        return X, X

    def bwd(ctx, g, a, u, x0=None):
        ga, gu, gx0 = kernels.scan_states_backward(np.ascontiguousarray(a), ctx, np.ascontiguousarray(g))
        return (ga, gu) if x0 is None else (ga, gu, gx0)
    return fwd, bwd


@register("readout")
def _readout():
    def fwd(X, c):
        return np.einsum("btdn,dn->btd", X, c), None

    def bwd(ctx, g, X, c):
        return np.einsum("btd,dn->btdn", g, c), np.einsum("btd,btdn->dn", g, X)
    return fwd, bwd


@register("time_slice")
def _time_slice():
    def fwd(X, start, stop):
        return X[:, start:stop], None

    def bwd(ctx, g, X, start, stop):
        out = np.zeros_like(X)
        out[:, start:stop] = g
        return (out,)
    return fwd, bwd


@register("time_index")
def _time_index():
    def fwd(X, t):
        return X[:, t], None

    def bwd(ctx, g, X, t):
        out = np.zeros_like(X)
        out[:, t] = g
        return (out,)
    return fwd, bwd


# ------------------------------------------------------ convolutional blocks

def _conv1d_same(x, W, b):
    B, Cin, L = x.shape
    Cout, _, K = W.shape
    p = (K - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, K - 1 - p)))
    cols = np.stack([xp[:, :, k:k + L] for k in range(K)], axis=-1)  # (B, Cin, L, K)
    return np.einsum("bclk,ock->bol", cols, W) + b[None, :, None], cols


@register("conv1d")
def _conv1d():
    """Stride-1 convolution with zero "same" padding (odd kernels)."""
    def fwd(x, W, b):
        y, _ = _conv1d_same(x, W, b)
        return y, None

    def bwd(ctx, g, x, W, b):
        B, Cin, L = x.shape
        Cout, _, K = W.shape
        p = (K - 1) // 2
        _, cols = _conv1d_same(x, W, b)
        gW = np.einsum("bol,bclk->ock", g, cols)
        gb = g.sum(axis=(0, 2))
        gcols = np.einsum("bol,ock->bclk", g, W)
        gxp = np.zeros((B, Cin, L + K - 1))
        for k in range(K):
            gxp[:, :, k:k + L] += gcols[..., k]
        return gxp[:, :, p:p + L], gW, gb
    return fwd, bwd


@register("maxpool2")
def _maxpool2():
    def fwd(x):
        B, C, L = x.shape
        r = x.reshape(B, C, L // 2, 2)
        return r.max(axis=-1), None

    def bwd(ctx, g, x):
        B, C, L = x.shape
        r = x.reshape(B, C, L // 2, 2)
        first = r[..., 0] >= r[..., 1]
        out = np.zeros_like(r)
        out[..., 0] = np.where(first, g, 0.0)
        out[..., 1] = np.where(first, 0.0, g)
        return (out.reshape(B, C, L),)
    return fwd, bwd


def _conv_transpose(x, W, stride, padding):
    B, Cin, L = x.shape
    _, Cout, K = W.shape
    full = (L - 1) * stride + K
    y = np.zeros((B, Cout, full))
    for k in range(K):
        y[:, :, k:k + (L - 1) * stride + 1:stride] += np.einsum("bil,io->bol", x, W[:, :, k])
    return y[:, :, padding:full - padding]


@register("conv_transpose1d")
def _conv_transpose1d():
    def fwd(x, W, b, stride=2, padding=1):
        return _conv_transpose(x, W, stride, padding) + b[None, :, None], None

    def bwd(ctx, g, x, W, b, stride=2, padding=1):
        B, Cin, L = x.shape
        _, Cout, K = W.shape
        full = (L - 1) * stride + K
        gfull = np.zeros((B, Cout, full))
        gfull[:, :, padding:full - padding] = g
        gx = np.zeros_like(x)
        gW = np.zeros_like(W)
        for k in range(K):
            gk = gfull[:, :, k:k + (L - 1) * stride + 1:stride]  # (B, Cout, L)
            gx += np.einsum("bol,io->bil", gk, W[:, :, k])
            gW[:, :, k] = np.einsum("bol,bil->io", gk, x)
        return gx, gW, g.sum(axis=(0, 2))
    return fwd, bwd


@register("pad_edge")
def _pad_edge():
    def fwd(x, total):
        if total == 0:
            return x.copy(), None
        return np.concatenate([x, np.repeat(x[..., -1:], total, axis=-1)], axis=-1), None

    def bwd(ctx, g, x, total):
        L = x.shape[-1]
        gx = g[..., :L].copy()
        gx[..., -1] += g[..., L:].sum(axis=-1)
        return (gx,)
    return fwd, bwd


@register("crop")
def _crop():
    def fwd(x, length):
        return x[..., :length], None

    def bwd(ctx, g, x, length):
        out = np.zeros_like(x)
        out[..., :length] = g
        return (out,)
    return fwd, bwd


# ------------------------------------------------------------------ grad API

@dataclass
class GradResult:
    wrt_params: Optional[np.ndarray]
    wrt_input: Optional[np.ndarray]
    loss: float


def squared_error(tape, pred, target):
    """Sum over the batch of ``||pred - target||_2^2``."""
    return tape.apply("sum", tape.apply("square", tape.apply("sub", pred, target)))


def mean_squared_error(tape, pred, target):
    return tape.apply("mean", tape.apply("square", tape.apply("sub", pred, target)))


def error_norm(tape, pred, target):
    """Sum over the batch of per-window ``||pred - target||_2``."""
    return tape.apply("sum", tape.apply("row_norm", tape.apply("sub", pred, target)))


def grad(loss, model, input, target, wrt_params=True, wrt_input=True) -> GradResult:
    """Reverse-mode gradient of ``loss(tape, model(input), target)``.

    ``input`` may be one window (shape (l,)) or a batch (B, l); the input
    gradient has the same shape.  The parameter gradient is flattened in
    :meth:`SpacetimeModel.parameter_names` order.
    """
    u = np.asarray(input, dtype=np.float64)
    single = u.ndim == 1
    if single:
        u = u[None]
    y = np.asarray(target, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    tape = Tape()
    params = model.param_nodes(tape, requires_grad=wrt_params)
    u_node = tape.leaf(u, requires_grad=wrt_input)
    pred = model.build(tape, params, u_node)
    out = loss(tape, pred, tape.const(y))
    tape.backward(out)
    gp = None
    if wrt_params:
        gp = np.concatenate([
            (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].value)).ravel()
            for k in model.parameter_names()
        ])
    gu = None
    if wrt_input:
        gu = u_node.grad if u_node.grad is not None else np.zeros_like(u)
        if single:
            gu = gu[0]
    return GradResult(gp, gu, float(out.value))
