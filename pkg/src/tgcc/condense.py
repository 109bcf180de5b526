"""Synthetic graph parameterization and gradient matching.

The synthetic adjacency is ``sigmoid(logits)`` with a zero diagonal. Matching
gradients requires differentiating the relay model's parameter gradient on the
synthetic graph with respect to the synthetic data; for the two-layer GCN this
is done in closed form by propagating a parameter-space tangent forward and
then backpropagating the resulting directional derivative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, softmax

from .errors import StateError, StructuralError
from .graph import Graph, gcn_normalize, gcn_normalize_vjp
from .relay import Adam, GradientSet, RelayModel, class_gradients, loss_and_grad_px, sgd_step

log = logging.getLogger(__name__)

ADJ_INIT = -3.0


@dataclass(frozen=True)
class SyntheticGraph:
    xs: np.ndarray
    adj_logits: np.ndarray
    ys: np.ndarray
    num_classes: int

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        logits = np.asarray(self.adj_logits, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.int64)
        m = xs.shape[0]
        if logits.shape != (m, m) or ys.shape != (m,):
            raise StructuralError("xs, adj_logits and ys disagree on the node count")
        if not np.allclose(logits, logits.T, rtol=0.0, atol=1e-9):
            raise StructuralError("adj_logits must be symmetric")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "adj_logits", logits)
        object.__setattr__(self, "ys", ys)

    @property
    def m(self) -> int:
        return self.xs.shape[0]

    def adjacency(self) -> np.ndarray:
        A = expit(self.adj_logits)
        np.fill_diagonal(A, 0.0)
        return A

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.ys, minlength=self.num_classes)

    def to_graph(self, threshold: float | None = None) -> Graph:
        """Materialize as a ``Graph`` whose train split is every node.

        With ``threshold`` the adjacency is binarized (entries below it are
        dropped); otherwise the weighted sigmoid adjacency is used.
        """
        A = self.adjacency()
        if threshold is not None:
            A = (A >= threshold).astype(np.float64)
            np.fill_diagonal(A, 0.0)
        splits = {"train": np.arange(self.m)}
        return Graph(A, self.xs, self.ys, splits, self.num_classes)

    @classmethod
    def from_subgraph(cls, g: Graph, nodes) -> "SyntheticGraph":
        """Induced subgraph of real nodes; edges become +/-inf logits (exact 0/1)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        sub = g.adjacency[nodes][:, nodes]
        sub = sub.toarray() if hasattr(sub, "toarray") else np.asarray(sub)
        with np.errstate(divide="ignore"):
            logits = np.log(sub) - np.log1p(-np.minimum(sub, 1.0))
        np.fill_diagonal(logits, -np.inf)
        return cls(g.features[nodes], logits, g.labels[nodes], g.num_classes)


@dataclass(frozen=True)
class SynGradient:
    xs: np.ndarray
    adj_logits: np.ndarray

    def __add__(self, other: "SynGradient") -> "SynGradient":
        return SynGradient(self.xs + other.xs, self.adj_logits + other.adj_logits)

    def scale(self, c: float) -> "SynGradient":
        return SynGradient(c * self.xs, c * self.adj_logits)

    @classmethod
    def zeros_like(cls, syn: SyntheticGraph) -> "SynGradient":
        return cls(np.zeros_like(syn.xs), np.zeros_like(syn.adj_logits))


def allocate_class_counts(hist, m: int) -> np.ndarray:
    """Largest-remainder proportional allocation with at least one node per class."""
    hist = np.asarray(hist, dtype=np.float64)
    C = hist.size
    m = max(int(m), C)
    quota = m * hist / hist.sum()
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    order = np.lexsort((np.arange(C), -rem))
    for k in order[: m - counts.sum()]:
        counts[k] += 1
    for k in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[k] = 1
    return counts


def condensed_size(n: int, r: float, num_classes: int) -> int:
    return max(num_classes, int(round(r * n)))


def init_synthetic(g: Graph, r: float, seed: int) -> SyntheticGraph:
    if not 0 < r < 1:
        raise ValueError("condensation ratio must lie in (0, 1)")
    C = g.num_classes
    if r * g.n < C:
        log.warning("r*N=%.1f is below the class count %d; using one node per class", r * g.n, C)
    m = condensed_size(g.n, r, C)
    train = g.split("train")
    hist = np.bincount(g.labels[train], minlength=C)
    counts = allocate_class_counts(np.maximum(hist, 0), m) if hist.sum() else allocate_class_counts(np.ones(C), m)
    rng = np.random.default_rng(seed)
    ys, rows = [], []
    for c in range(C):
        pool = train[g.labels[train] == c]
        if pool.size == 0:
            pool = np.flatnonzero(g.labels == c)
        pick = rng.choice(pool, size=counts[c], replace=counts[c] > pool.size)
        rows.append(pick)
        ys.append(np.full(counts[c], c))
    ys = np.concatenate(ys)
    xs = g.features[np.concatenate(rows)]
    noise = rng.uniform(-0.01, 0.01, size=(m, m))
    logits = ADJ_INIT + np.triu(noise, 1)
    logits = np.triu(logits, 1) + np.triu(logits, 1).T + np.diag(np.full(m, ADJ_INIT))
    return SyntheticGraph(xs, logits, ys, C)


# -- gradient distance ------------------------------------------------------

def _column_distance(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    one_zero = (na == 0) ^ (nb == 0)
    live = (na > 0) & (nb > 0)
    dist = float(np.sum(one_zero))
    grad = np.zeros_like(b)
    if live.any():
        a_l, b_l, na_l, nb_l = a[:, live], b[:, live], na[live], nb[live]
        cos = np.sum(a_l * b_l, axis=0) / (na_l * nb_l)
        dist += float(np.sum(1.0 - cos))
        grad[:, live] = -(a_l / (na_l * nb_l) - cos * b_l / nb_l**2)
    return dist, grad


def grad_distance(gA: GradientSet, gB: GradientSet) -> float:
    return grad_distance_and_grad(gA, gB)[0]


def grad_distance_and_grad(gA: GradientSet, gB: GradientSet) -> tuple[float, GradientSet]:
    """Summed per-column ``1 - cos`` over both layers, and its gradient in ``gB``."""
    total = 0.0
    grads = []
    for a, b in zip(gA.layers(), gB.layers()):
        if a.shape != b.shape:
            raise StructuralError(f"gradient shapes differ: {a.shape} vs {b.shape}")
        d, g = _column_distance(a, b)
        total += d
        grads.append(g)
    return total, GradientSet(*grads)


# -- real-graph views -------------------------------------------------------

@dataclass
class MatchView:
    """A real graph prepared for repeated gradient evaluation."""

    prop: object
    px: np.ndarray
    labels: np.ndarray
    class_masks: dict[int, np.ndarray]

    @classmethod
    def from_graph(cls, g: Graph) -> "MatchView":
        prop = gcn_normalize(g)
        px = np.asarray(prop @ g.features)
        train = g.split("train")
        masks = {c: train[g.labels[train] == c] for c in range(g.num_classes)}
        return cls(prop, px, g.labels, {c: m for c, m in masks.items() if m.size})

    def class_gradients(self, relay: RelayModel, classes) -> dict[int, GradientSet]:
        classes = [c for c in classes if c in self.class_masks]
        grads = class_gradients(relay, self.prop, self.px, self.labels, [self.class_masks[c] for c in classes])
        return dict(zip(classes, grads))


def _view(g) -> MatchView:
    return g if isinstance(g, MatchView) else MatchView.from_graph(g)


# -- synthetic-side differentiation ------------------------------------------

def adjacency_vjp(syn: SyntheticGraph, g_prop: np.ndarray, A: np.ndarray | None = None, P: np.ndarray | None = None) -> np.ndarray:
    """Pull a gradient on the GCN-normalized synthetic adjacency back to the logits."""
    if A is None:
        A = syn.adjacency()
    gA = gcn_normalize_vjp(A, g_prop, P)
    sig = expit(syn.adj_logits)
    g = (gA + gA.T) * sig * (1.0 - sig)
    np.fill_diagonal(g, 0.0)
    return g


def hidden_vjp(syn: SyntheticGraph, W1: np.ndarray, g_hidden: np.ndarray) -> SynGradient:
    """Gradient of a loss on ``relu(P Xs W1)`` with respect to the synthetic data."""
    A = syn.adjacency()
    P = gcn_normalize(A)
    Q = P @ syn.xs
    act = (Q @ W1) > 0
    dQ = (g_hidden * act) @ W1.T
    dP = dQ @ syn.xs.T
    return SynGradient(P.T @ dQ, adjacency_vjp(syn, dP, A, P))


def _syn_match_backward(relay: RelayModel, syn: SyntheticGraph, tangents: dict[int, GradientSet]):
    """Gradient of ``sum_c <grad_W L_c(syn), U_c>`` with respect to the synthetic data.

    ``L_c`` is the relay cross-entropy on the synthetic nodes of class ``c``.
    Returns ``(syn_grads_by_class, SynGradient)``.
    """
    W1, W2 = relay.W1, relay.W2
    X = syn.xs
    A = syn.adjacency()
    P = gcn_normalize(A)
    Q = P @ X
    H1 = Q @ W1
    act = H1 > 0
    R = np.maximum(H1, 0.0)
    O = P @ R
    Z = O @ W2
    S = softmax(Z, axis=1)
    dP = np.zeros_like(P)
    dQ = np.zeros_like(Q)
    for c, (U1, U2) in ((c, t.layers()) for c, t in tangents.items()):
        idx = np.flatnonzero(syn.ys == c)
        GZ = np.zeros_like(Z)
        GZ[idx] = S[idx]
        GZ[idx, c] -= 1.0
        GZ /= idx.size
        R_t = act * (Q @ U1)
        O_t = P @ R_t
        Z_t = O_t @ W2 + O @ U2
        B = np.zeros_like(Z)
        s_rows = S[idx]
        zt_rows = Z_t[idx]
        B[idx] = s_rows * (zt_rows - np.sum(s_rows * zt_rows, axis=1, keepdims=True)) / idx.size
        dO = B @ W2.T + GZ @ U2.T
        dO_t = GZ @ W2.T
        dP += dO @ R.T + dO_t @ R_t.T
        dH1 = (P.T @ dO) * act
        dH1_t = (P.T @ dO_t) * act
        dQ += dH1 @ W1.T + dH1_t @ U1.T
    dP += dQ @ X.T
    dX = P.T @ dQ
    return SynGradient(dX, adjacency_vjp(syn, dP, A, P))


def syn_class_gradients(relay: RelayModel, syn: SyntheticGraph) -> dict[int, GradientSet]:
    P = gcn_normalize(syn.adjacency())
    px = P @ syn.xs
    classes = [c for c in range(syn.num_classes) if np.any(syn.ys == c)]
    grads = class_gradients(relay, P, px, syn.ys, [np.flatnonzero(syn.ys == c) for c in classes])
    return dict(zip(classes, grads))


def condensation_loss(g, g_aug, syn: SyntheticGraph, relay: RelayModel) -> tuple[float, SynGradient]:
    """Per-class gradient matching against the original and the augmented graph.

    ``g`` and ``g_aug`` may be ``Graph`` objects or prepared ``MatchView``s.
    """
    if relay.d != syn.xs.shape[1]:
        raise StructuralError("relay input dim does not match synthetic features")
    views = [_view(g), _view(g_aug)]
    syn_grads = syn_class_gradients(relay, syn)
    total = 0.0
    tangents: dict[int, GradientSet] = {}
    for view in views:
        real = view.class_gradients(relay, syn_grads.keys())
        for c, g_real in real.items():
            d, u = grad_distance_and_grad(g_real, syn_grads[c])
            total += d
            tangents[c] = tangents[c] + u if c in tangents else u
    if not tangents:
        return total, SynGradient.zeros_like(syn)
    return total, _syn_match_backward(relay, syn, tangents)


# -- outer loop ---------------------------------------------------------------

@dataclass
class MatchState:
    t: int
    T: int
    relay: RelayModel
    trace: list[float] = field(default_factory=list)
    optimizer: Adam | None = None
    relay_update_sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.t <= self.T:
            raise StateError(f"step {self.t} outside [0, {self.T}]")


def apply_syn_update(syn: SyntheticGraph, grad: SynGradient, optimizer: Adam) -> SyntheticGraph:
    params = optimizer.step({"xs": syn.xs, "adj": syn.adj_logits}, {"xs": grad.xs, "adj": grad.adj_logits})
    logits = params["adj"]
    return replace(syn, xs=params["xs"], adj_logits=(logits + logits.T) / 2)


def train_relay_on_syn(relay: RelayModel, syn: SyntheticGraph, steps: int, lr: float) -> RelayModel:
    if steps <= 0:
        return relay
    P = gcn_normalize(syn.adjacency())
    px = P @ syn.xs
    everyone = np.arange(syn.m)
    for _ in range(steps):
        _, g = loss_and_grad_px(relay, P, px, syn.ys, everyone)
        relay = sgd_step(relay, g, lr)
    return relay


def outer_step(
    state: MatchState,
    g,
    g_aug,
    syn: SyntheticGraph,
    lrs: dict[str, float],
    inner_steps: int,
    aux_grad: SynGradient | None = None,
    cond_weight: float = 1.0,
) -> tuple[MatchState, SyntheticGraph]:
    """One gradient-matching iteration.

    Updates the synthetic graph on ``cond_weight * L_cond`` plus ``aux_grad``,
    then advances the relay on the synthetic cross-entropy only. The matching
    distance is appended to ``state.trace``.
    """
    if state.t >= state.T:
        raise StateError(f"match state exhausted its horizon T={state.T}")
    dist, grad = condensation_loss(g, g_aug, syn, state.relay)
    grad = grad.scale(cond_weight)
    if aux_grad is not None:
        grad = grad + aux_grad
    opt = state.optimizer or Adam({"xs": lrs.get("lr_x", 0.0), "adj": lrs.get("lr_adj", 0.0)})
    if lrs.get("lr_x", 0.0) or lrs.get("lr_adj", 0.0):
        syn = apply_syn_update(syn, grad, opt)
    relay = train_relay_on_syn(state.relay, syn, inner_steps, lrs.get("lr_relay", 0.0))
    sources = state.relay_update_sources + ["syn"] * max(inner_steps, 0)
    new_state = MatchState(state.t + 1, state.T, relay, state.trace + [dist], opt, sources)
    return new_state, syn
