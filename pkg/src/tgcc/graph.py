"""Graph container, Laplacian / GCN normalizations and dense spectra."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, StructuralError

SYMMETRY_TOL = 1e-9
EIGEN_CAP = 5000
SPLIT_NAMES = ("train", "val", "test")


def _is_sparse(m) -> bool:
    return sp.issparse(m)


def as_dense(m) -> np.ndarray:
    if _is_sparse(m):
        return m.toarray()
    return np.asarray(m, dtype=np.float64)


def check_symmetric(adj, tol: float = SYMMETRY_TOL) -> None:
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise StructuralError(f"adjacency must be square, got shape {adj.shape}")
    if _is_sparse(adj):
        diff = abs(adj - adj.T)
        worst = diff.max() if diff.nnz else 0.0
    else:
        worst = np.max(np.abs(adj - adj.T)) if adj.size else 0.0
    if worst > tol:
        raise StructuralError(f"adjacency is not symmetric (max asymmetry {worst:.3g})")


@dataclass(frozen=True)
class Graph:
    """An attributed, undirected, possibly weighted graph with node splits.

    ``adjacency`` is a scipy sparse array for real datasets; augmented graphs
    produced by intervention are dense ndarrays. Either form is accepted by
    every operation in the package.
    """

    adjacency: Any
    features: np.ndarray
    labels: np.ndarray
    splits: Mapping[str, np.ndarray] = field(default_factory=dict)
    num_classes: int | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        adj = self.adjacency
        if _is_sparse(adj):
            adj = sp.csr_array(adj, dtype=np.float64)
            adj.sum_duplicates()
            adj.sort_indices()
        else:
            adj = np.asarray(adj, dtype=np.float64)
        object.__setattr__(self, "adjacency", adj)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in dict(self.splits).items()}
        object.__setattr__(self, "splits", splits)
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", int(labels.max()) + 1 if labels.size else 0)
        self._validate()

    def _validate(self):
        n = self.adjacency.shape[0]
        check_symmetric(self.adjacency)
        if self.features.shape[0] != n or self.labels.shape != (n,):
            raise StructuralError(
                f"features {self.features.shape} / labels {self.labels.shape} do not match n={n}"
            )
        diag = self.adjacency.diagonal()
        if np.any(diag != 0):
            raise StructuralError("stored adjacency must not contain self-loops")
        if _is_sparse(self.adjacency):
            if self.adjacency.nnz and self.adjacency.data.min() < 0:
                raise StructuralError("adjacency must be nonnegative")
        elif self.adjacency.size and self.adjacency.min() < 0:
            raise StructuralError("adjacency must be nonnegative")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise StructuralError("labels out of range [0, C)")
        missing = set(range(self.num_classes)) - set(np.unique(self.labels).tolist())
        if missing:
            raise StructuralError(f"classes {sorted(missing)} never appear in labels")
        seen: set[int] = set()
        for name, idx in self.splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise StructuralError(f"split {name!r} has indices outside [0, {n})")
            s = set(idx.tolist())
            if len(s) != idx.size or seen & s:
                raise StructuralError(f"split {name!r} overlaps another split or repeats nodes")
            seen |= s

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def dense_adjacency(self) -> np.ndarray:
        return as_dense(self.adjacency)

    def split(self, name: str) -> np.ndarray:
        return self.splits.get(name, np.zeros(0, dtype=np.int64))

    def num_edges(self) -> int:
        """Undirected edges with nonzero weight."""
        if _is_sparse(self.adjacency):
            return int(sp.triu(self.adjacency, k=1).count_nonzero())
        return int(np.count_nonzero(np.triu(self.adjacency, k=1)))

    def with_adjacency(self, adj, **meta) -> "Graph":
        return Graph(adj, self.features, self.labels, self.splits, self.num_classes, {**self.meta, **meta})


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Sum of eigencomponents with ascending index in [start, stop)."""
        u = self.eigenvectors[:, start:stop]
        return (u * self.eigenvalues[start:stop]) @ u.T


def _adjacency_of(g) -> Any:
    adj = g.adjacency if isinstance(g, Graph) else g
    if not _is_sparse(adj):
        adj = np.asarray(adj, dtype=np.float64)
    check_symmetric(adj)
    return adj


def degrees(adj) -> np.ndarray:
    return np.asarray(adj.sum(axis=1), dtype=np.float64).ravel()


def _inv_sqrt(deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(deg)
    pos = deg > 0
    out[pos] = deg[pos] ** -0.5
    return out


def normalized_laplacian(g) -> np.ndarray:
    """Dense ``I - D^-1/2 A D^-1/2``; isolated nodes keep a unit diagonal."""
    adj = _adjacency_of(g)
    s = _inv_sqrt(degrees(adj))
    a = as_dense(adj)
    lap = -(s[:, None] * a * s[None, :])
    lap[np.diag_indices_from(lap)] += 1.0
    return lap


def gcn_normalize(g):
    """``D~^-1/2 (A + I) D~^-1/2``. Sparse in, sparse out."""
    adj = _adjacency_of(g)
    n = adj.shape[0]
    if _is_sparse(adj):
        a = sp.csr_array(adj + sp.eye_array(n, format="csr"))
        s = _inv_sqrt(degrees(a))
        d = sp.dia_array((s[None, :], [0]), shape=(n, n))
        return sp.csr_array(d @ a @ d)
    a = adj + np.eye(n)
    s = _inv_sqrt(a.sum(axis=1))
    return s[:, None] * a * s[None, :]


def gcn_normalize_vjp(adj: np.ndarray, grad: np.ndarray, prop: np.ndarray | None = None) -> np.ndarray:
    """Pull ``dL/dP`` back to ``dL/dA`` for ``P = gcn_normalize(A)``.

    Works on dense matrices only (synthetic graphs are small). The returned
    gradient treats every entry of ``A`` as independent, including the
    diagonal; callers mirror and mask as their parameterization requires.
    """
    a = adj + np.eye(adj.shape[0])
    deg = a.sum(axis=1)
    s = deg ** -0.5
    if prop is None:
        prop = s[:, None] * a * s[None, :]
    direct = grad * s[:, None] * s[None, :]
    gp = grad * prop
    # dP_kl/dd_k = -P_kl / (2 d_k), likewise for l
    g_deg = -0.5 * (gp.sum(axis=1) + gp.sum(axis=0)) / deg
    return direct + g_deg[:, None]


def spectral_decompose(lap, cap: int = EIGEN_CAP) -> SpectralDecomposition:
    lap = as_dense(lap)
    n = lap.shape[0]
    if n > cap:
        raise CapacityError(
            f"dense eigendecomposition capped at {cap} nodes (got {n}); subsample the graph first"
        )
    check_symmetric(lap, tol=1e-8)
    vals, vecs = np.linalg.eigh((lap + lap.T) / 2)
    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(n)])
    signs[signs == 0] = 1.0
    return SpectralDecomposition(vals, vecs * signs)


def degree_marginals(g, floor: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    deg = degrees(_adjacency_of(g))
    deg = np.where(deg > 0, deg, floor)
    a = deg / deg.sum()
    return a, a.copy()
