"""Bundle persistence, Planetoid import and synthetic graph generation.

A graph bundle is a directory::

    meta.json      n, d, C, format version, provenance
    edges.tsv      "src<TAB>dst[<TAB>weight]", src < dst, sorted
    features.bin   b"TGCCBND1", rows and cols as uint64 LE, float32 LE payload
    labels.tsv     one integer label per line
    splits.json    {"train": [...], "val": [...], "test": [...]}

Condensed bundles add ``adjacency.bin`` and ``logits.bin`` (same binary
layout), ``config.json`` and ``loss_trace.json``.
"""
from __future__ import annotations

import json
import os
import pickle
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .condense import SyntheticGraph
from .errors import HeaderMismatchError, IndexRangeError, MissingFileError, RawImportError, StructuralError
from .graph import Graph
from .relay import RelayModel

MAGIC = b"TGCCBND1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sQQ")
BUNDLE_FILES = ("meta.json", "edges.tsv", "features.bin", "labels.tsv", "splits.json")
CONDENSED_FILES = ("adjacency.bin", "logits.bin", "config.json", "loss_trace.json")


# -- low-level writers ------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def encode_matrix(M: np.ndarray) -> bytes:
    M = np.ascontiguousarray(M, dtype="<f4")
    if M.ndim != 2:
        raise StructuralError("only 2-D matrices can be encoded")
    return HEADER.pack(MAGIC, M.shape[0], M.shape[1]) + M.tobytes()


def decode_matrix(data: bytes, name: str = "matrix") -> np.ndarray:
    if len(data) < HEADER.size:
        raise HeaderMismatchError(f"{name}: truncated header")
    magic, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HeaderMismatchError(f"{name}: bad magic {magic!r}")
    payload = len(data) - HEADER.size
    if payload != rows * cols * 4:
        raise HeaderMismatchError(f"{name}: header says {rows}x{cols} but payload holds {payload} bytes")
    return np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(rows, cols).astype(np.float64)


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing bundle file: {path}") from exc


def _format_weight(w: float) -> str:
    return repr(float(np.float32(w)))


def edge_lines(adj) -> list[str]:
    A = sp.triu(sp.csr_array(adj), k=1).tocoo()
    order = np.lexsort((A.col, A.row))
    rows, cols, vals = A.row[order], A.col[order], A.data[order]
    weighted = np.any(vals != 1.0)
    if weighted:
        return [f"{r}\t{c}\t{_format_weight(v)}" for r, c, v in zip(rows, cols, vals) if v != 0]
    return [f"{r}\t{c}" for r, c, v in zip(rows, cols, vals) if v != 0]


# -- graph bundles ----------------------------------------------------------

def save_bundle(g: Graph, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    prov = dict(provenance if provenance is not None else g.meta.get("provenance", {}))
    meta = {"n": g.n, "d": g.d, "C": int(g.num_classes), "format_version": FORMAT_VERSION, "provenance": prov}
    edges = "".join(line + "\n" for line in edge_lines(g.adjacency))
    labels = "".join(f"{int(y)}\n" for y in g.labels)
    splits = {k: [int(i) for i in v] for k, v in sorted(g.splits.items())}
    _atomic_write(path / "edges.tsv", edges.encode())
    _atomic_write(path / "features.bin", encode_matrix(g.features))
    _atomic_write(path / "labels.tsv", labels.encode())
    _atomic_write(path / "splits.json", _json_bytes(splits))
    _atomic_write(path / "meta.json", _json_bytes(meta))
    return path


def _parse_edges(text: str, n: int) -> sp.csr_array:
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise HeaderMismatchError(f"edges.tsv line {lineno}: expected 2 or 3 fields")
        r, c = int(parts[0]), int(parts[1])
        if not (0 <= r < n and 0 <= c < n):
            raise IndexRangeError(f"edges.tsv line {lineno}: node index outside [0, {n})")
        rows.append(r)
        cols.append(c)
        vals.append(float(parts[2]) if len(parts) == 3 else 1.0)
    r, c, v = np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals)
    A = sp.coo_array((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n))
    return sp.csr_array(A)


def load_bundle(path) -> Graph:
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"bundle directory not found: {path}")
    for name in BUNDLE_FILES:
        if not (path / name).is_file():
            raise MissingFileError(f"missing bundle file: {path / name}")
    meta = json.loads(_read(path / "meta.json"))
    n, d, C = int(meta["n"]), int(meta["d"]), int(meta["C"])
    X = decode_matrix(_read(path / "features.bin"), "features.bin")
    if X.shape != (n, d):
        raise HeaderMismatchError(f"features.bin is {X.shape}, meta.json says ({n}, {d})")
    labels = np.array([int(s) for s in _read(path / "labels.tsv").decode().split()], dtype=np.int64)
    if labels.shape != (n,):
        raise HeaderMismatchError(f"labels.tsv has {labels.size} entries, expected {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexRangeError(f"labels outside [0, {C})")
    splits = json.loads(_read(path / "splits.json"))
    for name, idx in splits.items():
        if any(not 0 <= int(i) < n for i in idx):
            raise IndexRangeError(f"split {name!r} has indices outside [0, {n})")
    A = _parse_edges(_read(path / "edges.tsv").decode(), n)
    return Graph(A, X, labels, splits, C, {"provenance": meta.get("provenance", {}), "bundle": str(path)})


# -- condensed bundles ------------------------------------------------------

@dataclass
class CondensedBundle:
    syn: SyntheticGraph
    config_json: str
    loss_trace: list


def save_condensed(syn: SyntheticGraph, path, config_json: str, loss_trace: list, provenance: dict | None = None) -> Path:
    path = Path(path)
    save_bundle(syn.to_graph(), path, provenance or {"kind": "condensed"})
    _atomic_write(path / "adjacency.bin", encode_matrix(syn.adjacency()))
    _atomic_write(path / "logits.bin", encode_matrix(syn.adj_logits))
    _atomic_write(path / "config.json", config_json.encode())
    _atomic_write(path / "loss_trace.json", _json_bytes(loss_trace))
    return path


def load_condensed(path) -> CondensedBundle:
    path = Path(path)
    g = load_bundle(path)
    for name in CONDENSED_FILES:
        if not (path / name).is_file():
            raise MissingFileError(f"missing condensed file: {path / name}")
    logits = decode_matrix(_read(path / "logits.bin"), "logits.bin")
    adj = decode_matrix(_read(path / "adjacency.bin"), "adjacency.bin")
    if logits.shape != (g.n, g.n) or adj.shape != (g.n, g.n):
        raise HeaderMismatchError("adjacency/logits dims do not match the node count")
    if np.max(np.abs(adj - adj.T), initial=0.0) > 1e-6:
        raise HeaderMismatchError("stored condensed adjacency is not symmetric")
    syn = SyntheticGraph(g.features, logits, g.labels, g.num_classes)
    config = _read(path / "config.json").decode()
    trace = json.loads(_read(path / "loss_trace.json"))
    return CondensedBundle(syn, config, trace)


def save_encoder(model: RelayModel, path) -> Path:
    """JSON header line followed by raw little-endian float32 W1 then W2."""
    header = {"d": model.d, "h": model.h, "C": model.C, "seed": int(model.seed), "dtype": "<f4"}
    body = np.ascontiguousarray(model.W1, "<f4").tobytes() + np.ascontiguousarray(model.W2, "<f4").tobytes()
    _atomic_write(Path(path), (json.dumps(header, sort_keys=True) + "\n").encode() + body)
    return Path(path)


def load_encoder(path) -> RelayModel:
    data = _read(Path(path))
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    d, h, C = header["d"], header["h"], header["C"]
    flat = np.frombuffer(data, dtype="<f4", offset=nl + 1).astype(np.float64)
    if flat.size != d * h + h * C:
        raise HeaderMismatchError("encoder payload size does not match its header")
    return RelayModel(flat[: d * h].reshape(d, h), flat[d * h :].reshape(h, C), header["seed"])


# -- Planetoid import -------------------------------------------------------

def _load_pickle(path: Path):
    try:
        with open(path, "rb") as fh, warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            return pickle.load(fh, encoding="latin1")
    except FileNotFoundError as exc:
        raise RawImportError(f"missing raw file {path}") from exc
    except Exception as exc:
        raise RawImportError(f"cannot parse raw file {path}: {exc}") from exc


def _import_ind(root: Path, name: str) -> Graph:
    parts = {k: _load_pickle(root / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    index_file = root / f"ind.{name}.test.index"
    try:
        test_idx = np.array([int(s) for s in index_file.read_text().split()], dtype=np.int64)
    except FileNotFoundError as exc:
        raise RawImportError(f"missing raw file {index_file}") from exc
    except ValueError as exc:
        raise RawImportError(f"cannot parse raw file {index_file}") from exc
    graph = parts["graph"]
    n = max(len(graph), int(test_idx.max()) + 1)
    allx = sp.csr_array(parts["allx"])
    tx = sp.csr_array(parts["tx"])
    d = allx.shape[1]
    X = np.zeros((n, d))
    X[: allx.shape[0]] = allx.toarray()
    X[test_idx] = tx.toarray()
    Y = np.zeros((n, parts["ally"].shape[1]))
    Y[: allx.shape[0]] = parts["ally"]
    Y[test_idx] = parts["ty"]
    labels = Y.argmax(axis=1)
    raw_entries = sum(len(v) for v in graph.values())
    rows, cols = [], []
    for src, nbrs in graph.items():
        for dst in nbrs:
            if src != dst:
                rows.append(src)
                cols.append(dst)
    A = _symmetric_binary(np.array(rows), np.array(cols), n)
    n_train = parts["x"].shape[0]
    splits = {
        "train": np.arange(n_train),
        "val": np.arange(n_train, n_train + 500),
        "test": np.sort(test_idx),
    }
    prov = {"source": f"planetoid-ind:{name}", "raw_edges": raw_entries // 2, "split": "public"}
    return Graph(A, X, labels, splits, Y.shape[1], {"provenance": prov})


def _symmetric_binary(rows: np.ndarray, cols: np.ndarray, n: int) -> sp.csr_array:
    r = np.concatenate([rows, cols]).astype(np.int64)
    c = np.concatenate([cols, rows]).astype(np.int64)
    A = sp.csr_array((np.ones(r.size), (r, c)), shape=(n, n))
    A.sum_duplicates()
    A.data[:] = 1.0
    A.setdiag(0)
    A.eliminate_zeros()
    return A


def planetoid_style_split(labels: np.ndarray, num_classes: int, seed: int, per_class: int = 20, val: int = 500, test: int = 1000):
    rng = np.random.default_rng(seed)
    train = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        train.append(rng.choice(pool, size=min(per_class, pool.size), replace=False))
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.arange(labels.size), train))
    return {"train": train, "val": np.sort(rest[:val]), "test": np.sort(rest[val : val + test])}


def _import_linqs(root: Path, name: str, seed: int) -> Graph:
    content, cites = root / f"{name}.content", root / f"{name}.cites"
    try:
        lines = content.read_text().splitlines()
    except FileNotFoundError as exc:
        raise RawImportError(f"missing raw file {content}") from exc
    ids, feats, names = [], [], []
    try:
        for line in lines:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    except ValueError as exc:
        raise RawImportError(f"cannot parse raw file {content}: {exc}") from exc
    classes = sorted(set(names))
    labels = np.array([classes.index(s) for s in names], dtype=np.int64)
    where = {pid: k for k, pid in enumerate(ids)}
    rows, cols, raw = [], [], 0
    try:
        for line in cites.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise RawImportError(f"cannot parse raw file {cites}: bad line {line!r}")
            raw += 1
            a, b = parts
            if a in where and b in where and a != b:
                rows.append(where[a])
                cols.append(where[b])
    except FileNotFoundError as exc:
        raise RawImportError(f"missing raw file {cites}") from exc
    n = len(ids)
    A = _symmetric_binary(np.array(rows), np.array(cols), n)
    splits = planetoid_style_split(labels, len(classes), seed)
    prov = {"source": f"linqs:{name}", "raw_edges": raw, "split": f"planetoid-style seed {seed}", "classes": classes}
    return Graph(A, np.array(feats), labels, splits, len(classes), {"provenance": prov})


def row_normalize(X: np.ndarray) -> np.ndarray:
    """Scale each feature row to sum 1; all-zero rows stay zero."""
    sums = np.abs(X).sum(axis=1, keepdims=True)
    return X / np.where(sums > 0, sums, 1.0)


def import_planetoid(root, name: str | None = None, seed: int = 0, normalize: bool = True) -> Graph:
    """Import Planetoid ``ind.<name>.*`` files or a LINQS ``<name>.content/.cites`` pair.

    With ``normalize`` the bag-of-words features are row-normalized.
    """
    g = _import_raw(Path(root), name, seed)
    if not normalize:
        return g
    prov = {**g.meta["provenance"], "features": "row-normalized"}
    return Graph(g.adjacency, row_normalize(g.features), g.labels, g.splits, g.num_classes, {"provenance": prov})


def _import_raw(root: Path, name: str | None, seed: int) -> Graph:
    if not root.is_dir():
        raise RawImportError(f"raw directory not found: {root}")
    if name is None:
        ind = sorted(p.name.split(".")[1] for p in root.glob("ind.*.graph"))
        linqs = sorted(p.stem for p in root.glob("*.content"))
        if ind:
            name = ind[0]
        elif linqs:
            name = linqs[0]
        else:
            raise RawImportError(f"no Planetoid or LINQS files under {root}")
    if (root / f"ind.{name}.graph").exists():
        return _import_ind(root, name)
    return _import_linqs(root, name, seed)


# -- synthetic graphs -------------------------------------------------------

def stratified_splits(labels: np.ndarray, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> dict[str, np.ndarray]:
    out: dict[str, list] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k_train = max(1, int(round(fractions[0] * idx.size)))
        k_val = int(round(fractions[1] * idx.size))
        out["train"].append(idx[:k_train])
        out["val"].append(idx[k_train : k_train + k_val])
        out["test"].append(idx[k_train + k_val :])
    return {k: np.sort(np.concatenate(v)) for k, v in out.items()}


def gen_sbm(blocks, p_in: float, p_out: float, d: int, seed: int, feature_scale: float = 1.0) -> Graph:
    """Stochastic block model with Gaussian class-mean features and 60/20/20 splits."""
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    blocks = [int(b) for b in blocks]
    if not blocks or min(blocks) < 1:
        raise ValueError("every block needs at least one node")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(blocks)), blocks)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    A = (upper | upper.T).astype(np.float64)
    means = rng.normal(size=(len(blocks), d)) * feature_scale
    X = means[labels] + rng.normal(size=(n, d))
    splits = stratified_splits(labels, rng)
    prov = {"source": "sbm", "blocks": blocks, "p_in": p_in, "p_out": p_out, "d": d, "seed": seed}
    return Graph(sp.csr_array(A), X, labels, splits, len(blocks), {"provenance": prov})


def subsample(g: Graph, max_nodes: int, seed: int) -> Graph:
    """Induced subgraph on a seeded node sample; for capped experiments only."""
    if max_nodes >= g.n:
        return g
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(g.num_classes):
        keep.append(rng.choice(np.flatnonzero(g.labels == c), size=1))
    rest = np.setdiff1d(np.arange(g.n), np.concatenate(keep))
    keep.append(rng.choice(rest, size=max_nodes - g.num_classes, replace=False))
    nodes = np.sort(np.concatenate(keep))
    remap = -np.ones(g.n, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    A = sp.csr_array(g.adjacency)[nodes][:, nodes] if sp.issparse(g.adjacency) else g.adjacency[np.ix_(nodes, nodes)]
    splits = {k: np.sort(remap[v][remap[v] >= 0]) for k, v in g.splits.items()}
    prov = {**g.meta.get("provenance", {}), "subsample": {"max_nodes": max_nodes, "seed": seed}}
    return Graph(A, g.features[nodes], g.labels[nodes], splits, g.num_classes, {"provenance": prov})
