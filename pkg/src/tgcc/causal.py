"""Dimension-level invariance and independence losses over two embedding views.

With a linear kernel, pairwise HSIC between embedding dimensions reduces to
squared sample covariance, so the independence term is the squared
off-diagonal mass of the covariance matrix. ``hsic_linear`` keeps the trace
form around as an independent check of that identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class EmbeddingPair:
    zA: np.ndarray
    zV: np.ndarray
    sA: np.ndarray
    sV: np.ndarray
    zbarA: np.ndarray
    zbarV: np.ndarray

    @classmethod
    def from_embeddings(cls, zA: np.ndarray, zV: np.ndarray) -> "EmbeddingPair":
        if zA.shape != zV.shape:
            raise StructuralError(f"view shapes differ: {zA.shape} vs {zV.shape}")
        za, sa = normalize_dims(zA)
        zv, sv = normalize_dims(zV)
        return cls(zA, zV, sa, sv, za, zv)


@dataclass(frozen=True)
class CausalLossTerms:
    alignment: float
    std_penalty: float
    independence: float
    total: float
    alpha: float
    beta: float
    gamma: float
    lambda_target: float


def normalize_dims(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center each column and scale it to unit L2 norm.

    Returns the normalized matrix and the population standard deviation of
    each column before normalization. Constant columns become zero columns
    with ``s = 0``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to normalize dimensions")
    c = Z - Z.mean(axis=0)
    norms = np.linalg.norm(c, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    zbar = np.where(norms > 0, c / safe, 0.0)
    return zbar, norms / np.sqrt(n)


def covariance_offdiag_sq(zbar: np.ndarray) -> float:
    """Sum of squared off-diagonal sample covariances (divisor n - 1)."""
    n = zbar.shape[0]
    c = zbar - zbar.mean(axis=0)
    cov = c.T @ c / (n - 1)
    return float(np.sum(cov**2) - np.sum(np.diag(cov) ** 2))


def hsic_linear(zi: np.ndarray, zj: np.ndarray) -> float:
    """Linear-kernel HSIC via the trace formula ``Tr(Ki H Kj H) / (n-1)^2``."""
    zi = np.asarray(zi, dtype=np.float64).ravel()
    zj = np.asarray(zj, dtype=np.float64).ravel()
    n = zi.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    H = np.eye(n) - np.ones((n, n)) / n
    Ki = np.outer(zi, zi)
    Kj = np.outer(zj, zj)
    return float(np.trace(Ki @ H @ Kj @ H) / (n - 1) ** 2)


def causal_loss(pair: EmbeddingPair, alpha: float, beta: float, gamma: float, lam: float) -> CausalLossTerms:
    if pair.zbarA.shape != pair.zbarV.shape:
        raise StructuralError("embedding views have different dimensions")
    alignment = float(np.sum(pair.zbarA * pair.zbarV))
    std_penalty = float(np.sum(np.abs(pair.sA - lam) + np.abs(pair.sV - lam)))
    independence = covariance_offdiag_sq(pair.zbarA) + covariance_offdiag_sq(pair.zbarV)
    total = -alpha * alignment + beta * std_penalty + gamma * independence
    return CausalLossTerms(alignment, std_penalty, independence, total, alpha, beta, gamma, lam)


def _normalize_backward(Z: np.ndarray, g_zbar: np.ndarray, g_s: np.ndarray) -> np.ndarray:
    n = Z.shape[0]
    c = Z - Z.mean(axis=0)
    norms = np.linalg.norm(c, axis=0)
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    zbar = c / safe
    proj = np.sum(zbar * g_zbar, axis=0)
    g_c = (g_zbar - zbar * proj) / safe + zbar * (g_s / np.sqrt(n))
    g_c[:, ~live] = 0.0
    return g_c - g_c.mean(axis=0)


def causal_loss_grad(zA: np.ndarray, zV: np.ndarray, alpha, beta, gamma, lam) -> tuple[CausalLossTerms, np.ndarray, np.ndarray]:
    """Loss terms plus gradients with respect to the raw embeddings ``zA`` and ``zV``."""
    pair = EmbeddingPair.from_embeddings(zA, zV)
    terms = causal_loss(pair, alpha, beta, gamma, lam)
    n = zA.shape[0]

    def indep_grad(zbar):
        G = zbar.T @ zbar
        np.fill_diagonal(G, 0.0)
        return 4.0 * zbar @ G / (n - 1) ** 2

    gA = -alpha * pair.zbarV + gamma * indep_grad(pair.zbarA)
    gV = -alpha * pair.zbarA + gamma * indep_grad(pair.zbarV)
    gsA = beta * np.sign(pair.sA - lam)
    gsV = beta * np.sign(pair.sV - lam)
    return terms, _normalize_backward(zA, gA, gsA), _normalize_backward(zV, gV, gsV)
