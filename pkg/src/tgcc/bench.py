"""Coreset baselines, evaluation protocols and ranking metrics."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, softmax
from scipy.stats import rankdata

from .condense import SyntheticGraph, allocate_class_counts
from .errors import ProtocolError, StructuralError
from .graph import Graph, gcn_normalize
from .relay import Adam, RelayModel, forward, train_full_batch

PROTOCOLS = ("single-task", "cross-task", "cross-dataset", "cross-both")


# -- metrics ----------------------------------------------------------------

def auc_rank(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) at every distinct threshold, tied scores grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / max(labels.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~labels).sum(), 1)]
    return fpr, tpr


def auc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve_points(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over thresholds of (recall gain) * precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.sum() == 0:
        raise ValueError("AP needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / labels.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(pred == truth)) if truth.size else float("nan")


# -- coresets ---------------------------------------------------------------

def herding_select(X: np.ndarray, k: int) -> list[int]:
    """Greedy mean matching: each pick minimizes ||mean(selected) - mean(X)||."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    target = X.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(X.shape[1])
    free = np.ones(X.shape[0], dtype=bool)
    for t in range(min(k, X.shape[0])):
        cand = (running + X) / (t + 1)
        dist = np.linalg.norm(cand - target, axis=1)
        dist[~free] = np.inf
        # exact ties differ by rounding depending on summation order; take the lowest index
        best = dist.min()
        i = int(np.flatnonzero(dist <= best + 1e-12 * (1.0 + best))[0])
        chosen.append(i)
        free[i] = False
        running += X[i]
    return chosen


def kcenter_select(X: np.ndarray, k: int, start: int) -> list[int]:
    """Farthest-point traversal from ``start``; ties go to the lowest index."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    chosen = [int(start)]
    nearest = np.linalg.norm(X - X[start], axis=1)
    while len(chosen) < min(k, X.shape[0]):
        nearest[chosen] = -np.inf
        i = int(np.argmax(nearest))
        chosen.append(i)
        nearest = np.minimum(nearest, np.linalg.norm(X - X[i], axis=1))
    return chosen


def _class_counts(g: Graph, m: int) -> tuple[np.ndarray, np.ndarray]:
    train = g.split("train")
    if m < g.num_classes:
        raise StructuralError(f"m={m} is below the class count {g.num_classes}")
    if m > train.size:
        raise StructuralError(f"m={m} exceeds the train split size {train.size}")
    hist = np.bincount(g.labels[train], minlength=g.num_classes)
    counts = np.minimum(allocate_class_counts(hist, m), hist)
    # give back any nodes lost to small classes
    short = m - counts.sum()
    while short > 0:
        room = hist - counts
        c = int(np.argmax(room))
        counts[c] += 1
        short -= 1
    return train, counts


def _coreset(g: Graph, m: int, pick) -> SyntheticGraph:
    train, counts = _class_counts(g, m)
    nodes = []
    for c in range(g.num_classes):
        pool = np.sort(train[g.labels[train] == c])
        if counts[c]:
            nodes.append(pool[np.asarray(pick(c, pool, int(counts[c])), dtype=np.int64)])
    return SyntheticGraph.from_subgraph(g, np.concatenate(nodes))


def coreset_random(g: Graph, m: int, seed: int) -> SyntheticGraph:
    rng = np.random.default_rng(seed)
    return _coreset(g, m, lambda c, pool, k: rng.choice(pool.size, size=k, replace=False))


def coreset_herding(g: Graph, m: int) -> SyntheticGraph:
    return _coreset(g, m, lambda c, pool, k: herding_select(g.features[pool], k))


def coreset_kcenter(g: Graph, m: int, seed: int) -> SyntheticGraph:
    rng = np.random.default_rng(seed)
    return _coreset(g, m, lambda c, pool, k: kcenter_select(g.features[pool], k, int(rng.integers(pool.size))))


# -- reports ----------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    metric: str
    mean: float
    std: float
    per_seed: list[float]
    bundle_hash: str
    extra: dict[str, list[float]] = field(default_factory=dict)
    adapter_used: bool = False

    @classmethod
    def from_values(cls, protocol: str, metric: str, values, bundle_hash: str, **kw) -> "EvalReport":
        if protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {protocol!r}")
        v = np.asarray(values, dtype=np.float64)
        return cls(protocol, metric, float(v.mean()), float(v.std()), [float(x) for x in v], bundle_hash, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def tsv_row(self) -> str:
        return f"{self.protocol}\t{self.metric}\t{self.mean:.6f}\t{self.std:.6f}\t{len(self.per_seed)}\t{self.bundle_hash[:12]}"


TSV_HEADER = "protocol\tmetric\tmean\tstd\tseeds\tbundle"


def summary_tsv(reports: list[EvalReport]) -> str:
    return "\n".join([TSV_HEADER, *(r.tsv_row() for r in reports)]) + "\n"


def syn_hash(syn: SyntheticGraph) -> str:
    h = hashlib.sha256()
    for arr in (syn.xs, syn.adj_logits, syn.ys):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- training helpers -------------------------------------------------------

@dataclass(frozen=True)
class EvalSettings:
    hidden: int = 64
    steps: int = 600
    lr: float = 0.01
    weight_decay: float = 5e-4
    threshold: float | None = None
    link_test_fraction: float = 0.1
    probe_steps: int = 300


def train_on_condensed(syn: SyntheticGraph, seed: int, settings: EvalSettings = EvalSettings()) -> RelayModel:
    sg = syn.to_graph(settings.threshold)
    prop = gcn_normalize(sg.adjacency)
    return train_full_batch(
        prop, sg.features, sg.labels, np.arange(sg.n), hidden=settings.hidden, num_classes=syn.num_classes,
        seed=seed, steps=settings.steps, lr=settings.lr, weight_decay=settings.weight_decay,
    )


def _check_dims(syn: SyntheticGraph, g: Graph) -> None:
    if syn.xs.shape[1] != g.d:
        raise ProtocolError(
            f"condensed features have d={syn.xs.shape[1]} but the target has d={g.d}; use eval_transfer (linear adapter)"
        )


def eval_node_classification(syn: SyntheticGraph, g: Graph, seeds, settings: EvalSettings = EvalSettings()) -> EvalReport:
    _check_dims(syn, g)
    prop = gcn_normalize(g.adjacency)
    test = g.split("test")
    accs = []
    for seed in seeds:
        model = train_on_condensed(syn, int(seed), settings)
        logits, _ = forward(model, prop, g.features)
        accs.append(accuracy(np.argmax(logits[test], axis=1), g.labels[test]))
    return EvalReport.from_values("single-task", "accuracy", accs, syn_hash(syn))


@dataclass(frozen=True)
class LinkSplit:
    train_adjacency: sp.csr_array
    pos: np.ndarray
    neg: np.ndarray


def split_edges(g: Graph, fraction: float, seed: int) -> LinkSplit:
    """Hold out ``fraction`` of edges and draw as many non-edges, uniformly."""
    A = sp.csr_array(g.adjacency) if sp.issparse(g.adjacency) else sp.csr_array(np.asarray(g.adjacency))
    up = sp.triu(A, k=1).tocoo()
    edges = np.stack([up.row, up.col], axis=1)
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(edges))))
    held = rng.choice(len(edges), size=k, replace=False)
    pos = edges[held]
    keep = np.ones(len(edges), dtype=bool)
    keep[held] = False
    kept = edges[keep]
    n = g.n
    train_adj = sp.csr_array(
        (np.ones(2 * len(kept)), (np.r_[kept[:, 0], kept[:, 1]], np.r_[kept[:, 1], kept[:, 0]])), shape=(n, n)
    )
    existing = set(map(tuple, edges.tolist()))
    neg: set[tuple[int, int]] = set()
    while len(neg) < k:
        u, v = rng.integers(n, size=2)
        if u == v:
            continue
        pair = (int(min(u, v)), int(max(u, v)))
        if pair not in existing:
            neg.add(pair)
    return LinkSplit(train_adj, pos, np.array(sorted(neg)))


def link_scores(Z: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """sigmoid of the dot product of column-centered embeddings."""
    Zc = Z - Z.mean(axis=0)
    return expit(np.sum(Zc[pairs[:, 0]] * Zc[pairs[:, 1]], axis=1))


def _link_metrics(Z: np.ndarray, split: LinkSplit) -> tuple[float, float, float]:
    scores = np.r_[link_scores(Z, split.pos), link_scores(Z, split.neg)]
    truth = np.r_[np.ones(len(split.pos), bool), np.zeros(len(split.neg), bool)]
    acc = accuracy(scores >= 0.5, truth)
    return acc, auc_rank(scores, truth), average_precision(scores, truth)


def eval_link_prediction(syn: SyntheticGraph, g: Graph, seeds, settings: EvalSettings = EvalSettings()) -> EvalReport:
    _check_dims(syn, g)
    accs, aucs, aps = [], [], []
    for seed in seeds:
        split = split_edges(g, settings.link_test_fraction, int(seed))
        model = train_on_condensed(syn, int(seed), settings)
        _, Z = forward(model, gcn_normalize(split.train_adjacency), g.features)
        acc, auc, ap = _link_metrics(Z, split)
        accs.append(acc)
        aucs.append(auc)
        aps.append(ap)
    return EvalReport.from_values("cross-task", "accuracy", accs, syn_hash(syn), extra={"auc": aucs, "ap": aps})


# -- transfer ---------------------------------------------------------------

@dataclass
class Probe:
    W1: np.ndarray
    adapter: np.ndarray | None
    Wp: np.ndarray
    b: np.ndarray

    def embed(self, prop, X: np.ndarray) -> np.ndarray:
        inp = X @ self.adapter if self.adapter is not None else X
        return np.maximum(prop @ inp @ self.W1, 0.0)

    def logits(self, prop, X: np.ndarray) -> np.ndarray:
        return prop @ self.embed(prop, X) @ self.Wp + self.b


def fit_probe(W1: np.ndarray, prop, X: np.ndarray, y: np.ndarray, train: np.ndarray, num_classes: int, seed: int, settings: EvalSettings) -> Probe:
    """Linear probe ``P Z Wp + b`` on a frozen first layer, with a jointly trained
    input adapter when the target feature dimension differs from the encoder's."""
    rng = np.random.default_rng(seed)
    d_in, h = W1.shape
    adapter = None
    if X.shape[1] != d_in:
        bound = 1.0 / np.sqrt(X.shape[1])
        adapter = rng.uniform(-bound, bound, size=(X.shape[1], d_in))
    params = {"Wp": rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=(h, num_classes)), "b": np.zeros(num_classes)}
    if adapter is not None:
        params["adapter"] = adapter
    px = prop @ X
    opt = Adam(settings.lr, weight_decay=settings.weight_decay)
    onehot = np.eye(num_classes)[y[train]]
    for _ in range(settings.probe_steps):
        q = px @ params["adapter"] if adapter is not None else px
        pre = q @ W1
        Z = np.maximum(pre, 0.0)
        O = prop @ Z
        logits = O[train] @ params["Wp"] + params["b"]
        G = (softmax(logits, axis=1) - onehot) / train.size
        grads = {"Wp": O[train].T @ G, "b": G.sum(axis=0)}
        if adapter is not None:
            dO = np.zeros_like(O)
            dO[train] = G @ params["Wp"].T
            dpre = (prop.T @ dO) * (pre > 0)
            grads["adapter"] = px.T @ (dpre @ W1.T)
        params = opt.step(params, grads)
    return Probe(W1, params.get("adapter"), params["Wp"], params["b"])


def eval_transfer(syn: SyntheticGraph, g: Graph, seeds, settings: EvalSettings = EvalSettings(), link: bool = False) -> EvalReport:
    """Frozen condensed-trained body plus a probe fitted on the target's train split."""
    adapter_used = syn.xs.shape[1] != g.d
    protocol = "cross-both" if link else "cross-dataset"
    values, aucs, aps = [], [], []
    for seed in seeds:
        model = train_on_condensed(syn, int(seed), settings)
        if link:
            split = split_edges(g, settings.link_test_fraction, int(seed))
            prop = gcn_normalize(split.train_adjacency)
        else:
            prop = gcn_normalize(g.adjacency)
        probe = fit_probe(model.W1, prop, g.features, g.labels, g.split("train"), g.num_classes, int(seed), settings)
        if link:
            acc, auc, ap = _link_metrics(probe.embed(prop, g.features), split)
            values.append(acc)
            aucs.append(auc)
            aps.append(ap)
        else:
            test = g.split("test")
            values.append(accuracy(np.argmax(probe.logits(prop, g.features)[test], axis=1), g.labels[test]))
    extra = {"auc": aucs, "ap": aps} if link else {}
    return EvalReport.from_values(protocol, "accuracy", values, syn_hash(syn), extra=extra, adapter_used=adapter_used)
