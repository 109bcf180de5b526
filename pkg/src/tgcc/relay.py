"""Two-layer GCN relay model with hand-written backprop.

The model is ``logits = P relu(P X W1) W2`` with no biases and no dropout, so
every gradient in this module is exact and deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import StructuralError


@dataclass(frozen=True)
class RelayModel:
    W1: np.ndarray
    W2: np.ndarray
    seed: int = 0

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def C(self) -> int:
        return self.W2.shape[1]


@dataclass(frozen=True)
class GradientSet:
    gW1: np.ndarray
    gW2: np.ndarray

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(self.gW1 + other.gW1, self.gW2 + other.gW2)

    def scale(self, c: float) -> "GradientSet":
        return GradientSet(c * self.gW1, c * self.gW2)

    def layers(self) -> tuple[np.ndarray, np.ndarray]:
        return self.gW1, self.gW2


def init_model(d: int, h: int, C: int, seed: int) -> RelayModel:
    if min(d, h, C) < 1:
        raise StructuralError("d, h and C must all be >= 1")
    rng = np.random.default_rng(seed)
    b1, b2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
    W1 = rng.uniform(-b1, b1, size=(d, h))
    W2 = rng.uniform(-b2, b2, size=(h, C))
    return RelayModel(W1, W2, seed)


def _check(model: RelayModel, prop, x: np.ndarray) -> None:
    n = x.shape[0]
    if prop.shape != (n, n):
        raise StructuralError(f"propagation matrix {prop.shape} does not match {n} nodes")
    if x.shape[1] != model.d:
        raise StructuralError(f"feature dim {x.shape[1]} != model input dim {model.d}")


def as_index(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise StructuralError("boolean mask must have one entry per node")
        return np.flatnonzero(mask)
    return mask.astype(np.int64)


def forward(model: RelayModel, prop, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, embeddings)``; embeddings are the post-ReLU hidden layer."""
    _check(model, prop, X)
    return forward_px(model, prop, prop @ X)


def forward_px(model: RelayModel, prop, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.maximum(px @ model.W1, 0.0)
    return prop @ (hidden @ model.W2), hidden


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(log_softmax(logits, axis=1)[np.arange(len(y)), y]))


def loss_and_grad(model: RelayModel, prop, X: np.ndarray, y, mask) -> tuple[float, GradientSet]:
    _check(model, prop, X)
    return loss_and_grad_px(model, prop, prop @ X, y, mask)


def loss_and_grad_px(model: RelayModel, prop, px: np.ndarray, y, mask) -> tuple[float, GradientSet]:
    """Masked mean softmax cross-entropy and its exact gradient.

    ``px`` is the precomputed ``prop @ X``; reusing it across calls is the
    main saving when the same graph is evaluated at many parameter values.
    """
    idx = as_index(mask, px.shape[0])
    if idx.size == 0:
        raise ValueError("mask selects no nodes")
    y = np.asarray(y)
    h1 = px @ model.W1
    r = np.maximum(h1, 0.0)
    o_rows = prop[idx] @ r
    if hasattr(o_rows, "toarray"):
        o_rows = o_rows.toarray()
    logits = o_rows @ model.W2
    yy = y[idx]
    loss = cross_entropy(logits, yy)
    gz = softmax(logits, axis=1)
    gz[np.arange(idx.size), yy] -= 1.0
    gz /= idx.size
    gW2 = o_rows.T @ gz
    go = gz @ model.W2.T
    gr = prop[idx].T @ go
    gh = np.asarray(gr) * (h1 > 0)
    gW1 = px.T @ gh
    return loss, GradientSet(gW1, gW2)


def class_gradients(model: RelayModel, prop, px: np.ndarray, y, masks) -> list[GradientSet]:
    """``loss_and_grad_px`` for several masks sharing one forward pass."""
    y = np.asarray(y)
    h1 = px @ model.W1
    active = h1 > 0
    r = np.maximum(h1, 0.0)
    gW2s, ghs = [], []
    for mask in masks:
        idx = as_index(mask, px.shape[0])
        if idx.size == 0:
            raise ValueError("mask selects no nodes")
        rows = prop[idx]
        o_rows = rows @ r
        logits = o_rows @ model.W2
        gz = softmax(logits, axis=1)
        gz[np.arange(idx.size), y[idx]] -= 1.0
        gz /= idx.size
        gW2s.append(o_rows.T @ gz)
        ghs.append(np.asarray(rows.T @ (gz @ model.W2.T)) * active)
    gh = np.hstack(ghs)
    # on sparse graphs only the receptive field of the masked nodes is nonzero
    live = np.flatnonzero(np.any(gh != 0, axis=1))
    gW1 = px[live].T @ gh[live] if live.size < px.shape[0] // 2 else px.T @ gh
    h = model.h
    return [GradientSet(gW1[:, k * h:(k + 1) * h], g2) for k, g2 in enumerate(gW2s)]


def sgd_step(model: RelayModel, grads: GradientSet, lr: float) -> RelayModel:
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    return RelayModel(model.W1 - lr * grads.gW1, model.W2 - lr * grads.gW2, model.seed)


def predict(model: RelayModel, prop, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, prop, X)[0], axis=1)


class Adam:
    """Minimal Adam over a dict of named arrays; used for syn, encoder and eval training."""

    def __init__(self, lr: float | dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _lr(self, name: str) -> float:
        return self.lr[name] if isinstance(self.lr, dict) else self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            lr = self._lr(name)
            if g is None or lr == 0:
                out[name] = p
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[name] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def train_full_batch(
    prop,
    X: np.ndarray,
    y,
    mask,
    *,
    hidden: int,
    num_classes: int,
    seed: int,
    steps: int = 600,
    lr: float = 0.01,
    weight_decay: float = 5e-4,
) -> RelayModel:
    """Fit a fresh relay GCN with full-batch Adam."""
    model = init_model(X.shape[1], hidden, num_classes, seed)
    px = prop @ X
    opt = Adam(lr, weight_decay=weight_decay)
    params = {"W1": model.W1, "W2": model.W2}
    for _ in range(steps):
        _, g = loss_and_grad_px(RelayModel(params["W1"], params["W2"], seed), prop, px, y, mask)
        params = opt.step(params, {"W1": g.gW1, "W2": g.gW2})
    return RelayModel(params["W1"], params["W2"], seed)
