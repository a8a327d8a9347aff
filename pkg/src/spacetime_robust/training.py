"""Adam optimizer and a minibatch training loop over flat parameter vectors.

Anything exposing ``flat_parameters``, ``set_flat_parameters``,
``param_nodes``, ``parameter_names`` and ``build`` can be trained here (the
forecaster and the detector autoencoder both do).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import grad, mean_squared_error
from .errors import NonFiniteLoss

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class FitHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def evaluate_loss(model, inputs, targets, loss=mean_squared_error, batch_size=1024) -> float:
    """Mean of ``loss`` over batches, weighted by batch size."""
    total, count = 0.0, 0
    for s in range(0, len(inputs), batch_size):
        xb, yb = inputs[s:s + batch_size], targets[s:s + batch_size]
        total += grad(loss, model, xb, yb, wrt_params=False, wrt_input=False).loss * len(xb)
        count += len(xb)
    return total / max(count, 1)


def fit(model, inputs, targets, *, epochs=50, batch_size=64, lr=1e-3, seed=0,
        val=None, loss=mean_squared_error, patience=None, clip_norm=None,
        post_step=None, optimizer=None) -> FitHistory:
    """Minibatch Adam on ``loss(model(inputs), targets)``.

    With ``val=(x, y)`` the parameters with the lowest validation loss are
    restored at the end (and ``patience`` epochs without improvement stop
    early).  ``post_step(model)`` runs after every update.
    """
    rng = np.random.default_rng(seed)
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    opt = optimizer or Adam(lr)
    hist = FitHistory()
    best = (np.inf, model.flat_parameters())
    stale = 0
    n = len(inputs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            res = grad(loss, model, inputs[idx], targets[idx], wrt_input=False)
            if not np.isfinite(res.loss) or not np.all(np.isfinite(res.wrt_params)):
                raise NonFiniteLoss(f"non-finite loss/gradient at epoch {epoch}, batch offset {s}")
            g = res.wrt_params
            if clip_norm is not None:
                gn = np.linalg.norm(g)
                if gn > clip_norm:
                    g = g * (clip_norm / gn)
            model.set_flat_parameters(opt.step(model.flat_parameters(), g))
            if post_step is not None:
                post_step(model)
            running += res.loss * len(idx)
            seen += len(idx)
        hist.train_loss.append(running / seen)
        if val is not None:
            vl = evaluate_loss(model, val[0], val[1], loss)
            hist.val_loss.append(vl)
            if vl < best[0]:
                best = (vl, model.flat_parameters())
                hist.best_epoch = epoch
                stale = 0
            else:
                stale += 1
            log.debug("epoch %d train %.6g val %.6g", epoch, hist.train_loss[-1], vl)
            if patience is not None and stale >= patience:
                break
    if val is not None and np.isfinite(best[0]):
        model.set_flat_parameters(best[1])
    return hist
