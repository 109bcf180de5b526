import filecmp
import json
import struct
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from tgcc.condense import init_synthetic
from tgcc.dataio import (
    MAGIC, decode_matrix, encode_matrix, gen_sbm, import_planetoid, load_bundle, load_condensed, load_encoder,
    save_bundle, save_condensed, save_encoder, subsample,
)
from tgcc.errors import BundleError, HeaderMismatchError, IndexRangeError, MissingFileError, RawImportError
from tgcc.graph import Graph
from tgcc.relay import init_model

RAW = Path(__file__).resolve().parents[1] / "data" / "raw"
needs_cora = pytest.mark.skipif(not (RAW / "cora" / "cora.content").exists(), reason="raw Cora files not present")
needs_citeseer = pytest.mark.skipif(not (RAW / "citeseer" / "ind.citeseer.graph").exists(), reason="raw Citeseer files not present")


def _two_node(tmp_path) -> Path:
    g = Graph(sp.csr_array(np.array([[0.0, 1.0], [1.0, 0.0]])), np.array([[1.0, 0.0], [0.0, 1.0]]),
              np.array([0, 1]), {"train": np.array([0, 1]), "val": np.array([], int), "test": np.array([], int)}, 2)
    return save_bundle(g, tmp_path / "tiny", {"source": "fixture"})


def _same_tree(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


def test_minimal_bundle(tmp_path):
    g = load_bundle(_two_node(tmp_path))
    assert g.n == 2 and g.d == 2 and g.num_edges() == 1
    assert (tmp_path / "tiny" / "edges.tsv").read_text() == "0\t1\n"
    assert (tmp_path / "tiny" / "features.bin").read_bytes()[:8] == MAGIC
    meta = json.loads((tmp_path / "tiny" / "meta.json").read_text())
    assert (meta["n"], meta["d"], meta["C"], meta["format_version"]) == (2, 2, 2, 1)


def test_matrix_encoding():
    M = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    data = encode_matrix(M)
    assert struct.unpack("<8sQQ", data[:24]) == (MAGIC, 2, 3)
    assert np.allclose(decode_matrix(data), M.astype(np.float32))
    with pytest.raises(HeaderMismatchError):
        decode_matrix(b"XXXXXXXX" + data[8:])
    with pytest.raises(HeaderMismatchError):
        decode_matrix(data[:10])


def test_corrupted_header(tmp_path):
    path = _two_node(tmp_path)
    raw = bytearray((path / "features.bin").read_bytes())
    raw[8:16] = struct.pack("<Q", 3)
    (path / "features.bin").write_bytes(bytes(raw))
    with pytest.raises(HeaderMismatchError):
        load_bundle(path)


def test_distinct_error_codes(tmp_path):
    with pytest.raises(MissingFileError):
        load_bundle(tmp_path / "nowhere")
    path = _two_node(tmp_path)
    (path / "edges.tsv").write_text("0\t5\n")
    with pytest.raises(IndexRangeError):
        load_bundle(path)
    path = _two_node(tmp_path)
    (path / "labels.tsv").unlink()
    with pytest.raises(MissingFileError):
        load_bundle(path)
    codes = {cls.code for cls in (MissingFileError, HeaderMismatchError, IndexRangeError, RawImportError)}
    assert len(codes) == 4


def test_round_trip_byte_identical(tmp_path):
    for weighted in (False, True):
        g = gen_sbm([8, 7], 0.5, 0.1, 3, seed=2)
        if weighted:
            A = g.dense_adjacency() * np.random.default_rng(0).uniform(0.1, 1, size=(15, 15))
            g = g.with_adjacency(np.triu(A, 1) + np.triu(A, 1).T)
        first = save_bundle(g, tmp_path / f"a{weighted}")
        second = save_bundle(load_bundle(first), tmp_path / f"b{weighted}", g.meta["provenance"])
        assert _same_tree(first, second)
        back = load_bundle(second)
        assert np.allclose(back.dense_adjacency(), g.dense_adjacency(), atol=1e-6)
        assert all(np.array_equal(back.splits[k], g.splits[k]) for k in g.splits)


def test_edges_sorted_and_stored_once(tmp_path):
    path = save_bundle(gen_sbm([10, 10], 0.4, 0.1, 2, seed=0), tmp_path / "g")
    pairs = [tuple(map(int, line.split("\t")[:2])) for line in (path / "edges.tsv").read_text().splitlines()]
    assert pairs == sorted(pairs) and all(a < b for a, b in pairs)


def test_condensed_round_trip(tmp_path):
    g = gen_sbm([10, 10], 0.4, 0.1, 4, seed=1)
    syn = init_synthetic(g, 0.3, 0)
    trace = [{"epoch": 0, "L_causal": 1.0, "L_InfoNCE": 2.0, "L_cond": 3.0, "total": 5.0}]
    path = save_condensed(syn, tmp_path / "c", '{"seed": 0}\n', trace)
    back = load_condensed(path)
    assert back.config_json == '{"seed": 0}\n' and back.loss_trace == trace
    A = back.syn.adjacency()
    assert np.max(np.abs(A - A.T)) <= 1e-6
    assert np.allclose(back.syn.adj_logits, syn.adj_logits, atol=1e-5)
    assert np.array_equal(back.syn.ys, syn.ys)
    (path / "logits.bin").unlink()
    with pytest.raises(MissingFileError):
        load_condensed(path)


def test_encoder_round_trip(tmp_path):
    model = init_model(5, 4, 3, seed=9)
    back = load_encoder(save_encoder(model, tmp_path / "enc.bin"))
    assert back.seed == 9
    assert np.allclose(back.W1, model.W1, atol=1e-7) and np.allclose(back.W2, model.W2, atol=1e-7)
    data = (tmp_path / "enc.bin").read_bytes()
    (tmp_path / "enc.bin").write_bytes(data[:-4])
    with pytest.raises(HeaderMismatchError):
        load_encoder(tmp_path / "enc.bin")


def test_sbm_cliques_and_determinism():
    g = gen_sbm([4, 3], 1.0, 0.0, 2, seed=0)
    A = g.dense_adjacency()
    assert np.array_equal(A[:4, :4], 1 - np.eye(4)) and np.array_equal(A[4:, 4:], 1 - np.eye(3))
    assert not A[:4, 4:].any()
    a, b = gen_sbm([5, 5], 0.3, 0.1, 3, seed=4), gen_sbm([5, 5], 0.3, 0.1, 3, seed=4)
    assert np.array_equal(a.dense_adjacency(), b.dense_adjacency()) and np.array_equal(a.features, b.features)
    assert list(a.labels) == [0] * 5 + [1] * 5
    with pytest.raises(ValueError):
        gen_sbm([5], 1.5, 0.0, 2, seed=0)


def test_sbm_splits_are_stratified():
    g = gen_sbm([50, 30], 0.1, 0.05, 2, seed=0)
    for c, size in ((0, 50), (1, 30)):
        counts = [np.sum(g.labels[g.split(k)] == c) for k in ("train", "val", "test")]
        assert counts == [round(0.6 * size), round(0.2 * size), size - round(0.6 * size) - round(0.2 * size)]


def test_sbm_edge_count_within_three_sigma():
    blocks, p_in, p_out = [20, 30], 0.3, 0.05
    pairs_in = sum(b * (b - 1) // 2 for b in blocks)
    pairs_out = blocks[0] * blocks[1]
    mean = pairs_in * p_in + pairs_out * p_out
    var = pairs_in * p_in * (1 - p_in) + pairs_out * p_out * (1 - p_out)
    counts = [gen_sbm(blocks, p_in, p_out, 2, seed=s).num_edges() for s in range(20)]
    assert abs(np.mean(counts) - mean) <= 3 * np.sqrt(var / 20)
    assert all(abs(c - mean) <= 5 * np.sqrt(var) for c in counts)


def test_subsample_keeps_every_class():
    g = gen_sbm([30, 30, 5], 0.2, 0.02, 3, seed=0)
    s = subsample(g, 20, seed=1)
    assert s.n == 20 and set(s.labels) == {0, 1, 2}
    assert "subsample" in s.meta["provenance"]
    assert subsample(g, 100, seed=1) is g


def test_import_errors(tmp_path):
    with pytest.raises(RawImportError):
        import_planetoid(tmp_path / "missing")
    (tmp_path / "x.content").write_text("p1 1 0 zzz\np2 0 q classA\n")
    (tmp_path / "x.cites").write_text("p1 p2\n")
    with pytest.raises(RawImportError, match="x.content"):
        import_planetoid(tmp_path)
    assert issubclass(RawImportError, BundleError)


@needs_cora
def test_cora_statistics(tmp_path):
    g = import_planetoid(RAW / "cora")
    assert (g.n, g.d, g.num_classes) == (2708, 1433, 7)
    assert g.meta["provenance"]["raw_edges"] == 5429
    assert g.num_edges() == 5278
    assert g.split("train").size == 140 and g.split("val").size == 500 and g.split("test").size == 1000
    assert np.allclose(g.features.sum(axis=1)[g.features.sum(axis=1) > 0], 1.0)
    again = import_planetoid(RAW / "cora")
    a, b = save_bundle(g, tmp_path / "a"), save_bundle(again, tmp_path / "b")
    assert _same_tree(a, b)
    assert _same_tree(a, save_bundle(load_bundle(a), tmp_path / "c"))


@needs_citeseer
def test_citeseer_statistics(tmp_path):
    g = import_planetoid(RAW / "citeseer")
    assert (g.n, g.d, g.num_classes) == (3327, 3703, 6)
    assert g.meta["provenance"]["raw_edges"] == 4732
    assert g.num_edges() == 4552
    assert g.split("train").size == 120 and g.split("test").size == 1000
    raw = import_planetoid(RAW / "citeseer", normalize=False)
    assert set(np.unique(raw.features)) <= {0.0, 1.0}
    a = save_bundle(g, tmp_path / "a")
    assert _same_tree(a, save_bundle(import_planetoid(RAW / "citeseer"), tmp_path / "b"))
