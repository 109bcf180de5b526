"""Spectral edge intervention: entropic transport plans for added and deleted edges.

Edges to add are the maximizer of ``<Theta L, D>^2 + eps H(D)`` over couplings
with degree marginals. The squared matching term is handled by repeatedly
linearizing it at the current plan and solving the resulting entropic
transport problem with Sinkhorn scaling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructuralError
from .graph import as_dense, degree_marginals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterventionPlan:
    delta_plus: np.ndarray
    delta_minus: np.ndarray
    theta: np.ndarray
    epsilon: float
    iters: int
    tol: float


def entropy(P: np.ndarray) -> float:
    """``H(P) = -sum P (log P - 1)`` with ``0 log 0 = 0``."""
    pos = P > 0
    return float(-np.sum(P[pos] * (np.log(P[pos]) - 1.0)))


def matching_term(theta: np.ndarray, L: np.ndarray, delta: np.ndarray) -> float:
    return float(np.sum((theta @ L) * delta))


def objective(theta, L, delta, eps) -> float:
    """``<Theta L, D>^2 + eps H(D)`` (the Lagrange terms vanish on feasible plans)."""
    return matching_term(theta, L, delta) ** 2 + eps * entropy(delta)


def sinkhorn(K: np.ndarray, a: np.ndarray, b: np.ndarray, iters: int = 500, tol: float = 1e-6) -> np.ndarray:
    """Scale a nonnegative kernel to marginals ``(a, b)``.

    Returns ``diag(u) K diag(v)``. Raises ``NumericError`` when the scaling
    vectors blow up, which in practice means the kernel underflowed.
    """
    u = np.ones_like(a)
    v = np.ones_like(b)
    for it in range(iters):
        kv = K @ v
        with np.errstate(divide="ignore", invalid="ignore"):
            u = a / kv
        ktu = K.T @ u
        with np.errstate(divide="ignore", invalid="ignore"):
            v = b / ktu
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericError(
                "Sinkhorn scaling diverged (kernel underflow); increase the entropy weight epsilon"
            )
        if it % 10 == 9 or it == iters - 1:
            row_err = np.abs(u * (K @ v) - a).sum()
            if row_err < tol:
                break
    return u[:, None] * K * v[None, :]


def _kernel(reward: np.ndarray, eps: float, support: np.ndarray) -> np.ndarray:
    r = np.where(support, reward, -np.inf)
    top = np.max(r[support]) if support.any() else 0.0
    with np.errstate(over="raise"):
        try:
            K = np.exp((r - top) / eps)
        except FloatingPointError as exc:
            raise NumericError("transport kernel overflowed; increase epsilon") from exc
    K[~support] = 0.0
    return K


def _majorize_sinkhorn(C, eps, a, b, support, sign, iters, tol, mm_iters):
    K = support.astype(np.float64)
    delta = sinkhorn(K, a, b, iters, tol)
    prev = None
    for _ in range(mm_iters):
        c = float(np.sum(C * delta))
        J = c * c + eps * entropy(delta)
        if prev is not None and abs(J - prev) < tol:
            break
        prev = J
        reward = sign * 2.0 * c * C
        delta = sinkhorn(_kernel(reward, eps, support), a, b, iters, tol)
    return delta


def solve_delta_plus(A, L, theta, eps: float, a, b, iters: int = 500, tol: float = 1e-6, mm_iters: int = 20) -> np.ndarray:
    """Unit-mass plan of edges to add; diagonal entries are forced to zero."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    L = as_dense(L)
    n = L.shape[0]
    if np.shape(theta) != (n, n):
        raise StructuralError("theta must be n x n")
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.any(a + b >= 1.0 - 1e-12):
        # a node holding half the mass leaves no interior zero-diagonal coupling
        log.warning("degenerate marginals (a_i + b_i >= 1); Sinkhorn will converge slowly")
    support = ~np.eye(n, dtype=bool)
    C = np.asarray(theta) @ L
    return _majorize_sinkhorn(C, eps, a, b, support, 1.0, iters, tol, mm_iters)


def solve_delta_minus(A, L, theta, eps: float, iters: int = 500, tol: float = 1e-6, mm_iters: int = 20) -> np.ndarray:
    """Unit-mass plan of edges to delete, supported on the existing edges of ``A``."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    A = as_dense(A)
    n = A.shape[0]
    support = A > 0
    np.fill_diagonal(support, False)
    if not support.any():
        return np.zeros((n, n))
    # isolated nodes have nothing to delete; solve on the rest
    live = np.flatnonzero(support.any(axis=1))
    sub = np.ix_(live, live)
    a, b = degree_marginals(A[sub])
    C = (np.asarray(theta) @ as_dense(L))[sub]
    delta = np.zeros((n, n))
    delta[sub] = _majorize_sinkhorn(C, eps, a, b, support[sub], -1.0, iters, tol, mm_iters)
    return np.minimum(delta, A)


def intervene(A, plan: InterventionPlan, scale: float) -> np.ndarray:
    """``V = A + s D+ - s D-`` clipped to [0, 1], symmetrized, no self-loops."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    V = np.clip(as_dense(A) + scale * plan.delta_plus - scale * plan.delta_minus, 0.0, 1.0)
    V = (V + V.T) / 2
    np.fill_diagonal(V, 0.0)
    return V


def matching_term_grad(theta, L, delta) -> np.ndarray:
    """Gradient of ``<Theta L, D>^2`` with respect to Theta."""
    L = as_dense(L)
    c = matching_term(theta, L, delta)
    return 2.0 * c * (delta @ L.T)


def update_theta(theta: np.ndarray, grad_signal: np.ndarray, lr: float) -> np.ndarray:
    """One ascent step on the matching term, entries clipped to [-1, 1]."""
    if np.shape(theta) != np.shape(grad_signal):
        raise StructuralError("theta and gradient shapes differ")
    return np.clip(theta + lr * grad_signal, -1.0, 1.0)


def init_theta(n: int, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(n, n))


def plan_intervention(A, L, theta, eps: float, iters: int = 500, tol: float = 1e-6) -> InterventionPlan:
    a, b = degree_marginals(A)
    plus = solve_delta_plus(A, L, theta, eps, a, b, iters, tol)
    minus = solve_delta_minus(A, L, theta, eps, iters, tol)
    return InterventionPlan(plus, minus, np.asarray(theta), eps, iters, tol)


def budget_scale(A, rho: float) -> float:
    """Scale turning a unit-mass plan into edits worth ``rho`` of the total edge weight."""
    total = float(as_dense(A).sum()) if not hasattr(A, "nnz") else float(A.sum())
    return rho * total if total > 0 else rho
