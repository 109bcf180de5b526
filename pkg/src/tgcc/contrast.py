"""Spectral negative samples, mean readout and InfoNCE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import (
    EIGEN_CAP,
    SpectralDecomposition,
    as_dense,
    degrees,
    normalized_laplacian,
    spectral_decompose,
)


@dataclass(frozen=True)
class NegativeSample:
    laplacian_hat: np.ndarray
    adjacency_neg: np.ndarray
    kappa: float
    kept_index_start: int


def kept_index_start(n: int, kappa: float) -> int:
    """First ascending eigen-index kept; the upper half of the spectrum is always kept."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return int(np.floor((1.0 - kappa) * n / 2))


def build_negative(V, kappa: float, decomposition: SpectralDecomposition | None = None, cap: int = EIGEN_CAP) -> NegativeSample:
    """Rebuild a graph from the high-frequency part of V's normalized Laplacian.

    Components below ``kept_index_start`` (the smooth, low-frequency ones)
    are dropped. Pass a precomputed ``decomposition`` to build several
    negatives from one eigensolve.
    """
    V = as_dense(V)
    n = V.shape[0]
    start = kept_index_start(n, kappa)
    if decomposition is None:
        decomposition = spectral_decompose(normalized_laplacian(V), cap=cap)
    L_hat = decomposition.reconstruct(start)
    L_hat = (L_hat + L_hat.T) / 2
    root = np.sqrt(degrees(V))
    adj = root[:, None] * (np.eye(n) - L_hat) * root[None, :]
    adj = np.clip(adj, 0.0, None)
    adj = (adj + adj.T) / 2
    np.fill_diagonal(adj, 0.0)
    return NegativeSample(L_hat, adj, kappa, start)


def readout(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z)
    if Z.shape[0] < 1:
        raise ValueError("readout of an empty node set")
    return Z.mean(axis=0)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def _cosine_grads(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0, np.zeros_like(u), np.zeros_like(v)
    c = float(u @ v / (nu * nv))
    gu = v / (nu * nv) - c * u / nu**2
    gv = u / (nu * nv) - c * v / nv**2
    return c, gu, gv


def infonce(h_i: np.ndarray, h_j: np.ndarray, negatives: Sequence[np.ndarray], t: float) -> float:
    return infonce_grad(h_i, h_j, negatives, t)[0]


def infonce_grad(h_i, h_j, negatives, t: float):
    """InfoNCE value and gradients ``(loss, g_i, g_j, [g_m])``.

    The loss is ``-log softmax`` of the positive similarity against the
    negatives, with cosine similarity and temperature ``t``.
    """
    if t <= 0:
        raise ValueError("temperature must be positive")
    if len(negatives) < 1:
        raise ValueError("need at least one negative")
    pos, gi_pos, gj = _cosine_grads(h_i, h_j)
    sims, gi_neg, gm = [pos], [gi_pos], []
    for h_m in negatives:
        s, gi, g = _cosine_grads(h_i, h_m)
        sims.append(s)
        gi_neg.append(gi)
        gm.append(g)
    logits = np.asarray(sims) / t
    top = logits.max()
    w = np.exp(logits - top)
    lse = top + np.log(w.sum())
    loss = float(lse - logits[0])
    p = w / w.sum()
    coef = p.copy()
    coef[0] -= 1.0
    coef /= t
    g_i = sum(c * g for c, g in zip(coef, gi_neg))
    g_j = coef[0] * gj
    g_ms = [coef[k + 1] * gm[k] for k in range(len(gm))]
    return loss, g_i, g_j, g_ms
