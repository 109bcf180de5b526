import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from tgcc.bench import (
    EvalReport, EvalSettings, auc_rank, auc_trapezoid, average_precision, coreset_herding, coreset_kcenter,
    coreset_random, eval_link_prediction, eval_node_classification, eval_transfer, fit_probe, herding_select,
    kcenter_select, split_edges, summary_tsv, syn_hash,
)
from tgcc.condense import SyntheticGraph
from tgcc.dataio import gen_sbm
from tgcc.errors import ProtocolError, StructuralError
from tgcc.graph import gcn_normalize
from tgcc.relay import forward, init_model, train_full_batch

QUICK = EvalSettings(hidden=16, steps=200, probe_steps=200)


@pytest.fixture(scope="module")
def sbm():
    return gen_sbm([60, 60, 60], 0.08, 0.01, 8, seed=0)


def _greedy_oracle(points, k):
    """Herding by brute force: try every remaining point, recompute the mean from scratch."""
    target = np.mean(points, axis=0)
    chosen = []
    for _ in range(k):
        best, best_d = None, np.inf
        for i in range(len(points)):
            if i in chosen:
                continue
            d = np.linalg.norm(np.mean([points[j] for j in chosen + [i]], axis=0) - target)
            if d < best_d - 1e-12:
                best, best_d = i, d
        chosen.append(best)
    return chosen


# -- herding / k-center -------------------------------------------------------

def test_herding_hand_example():
    pts = np.array([0.0, 1.0, 2.0, 10.0])
    picks = herding_select(pts, 2)
    assert picks[0] == 2
    # exhaustive search over the second pick given the first
    second = min((abs(np.mean([2.0, pts[j]]) - 3.25), j) for j in (0, 1, 3))[1]
    assert picks == [2, second] == [2, 1]


@settings(max_examples=40)
@given(st.integers(2, 12), st.integers(1, 3), st.integers(0, 10_000))
def test_herding_matches_exhaustive_trace(n, d, seed):
    pts = np.random.default_rng(seed).normal(size=(n, d))
    k = min(n, 5)
    assert herding_select(pts, k) == _greedy_oracle(list(pts), k)


def test_herding_identical_points():
    pts = np.ones((5, 3))
    sel = herding_select(pts, 3)
    assert sel == [0, 1, 2] and np.array_equal(pts[sel].mean(axis=0), pts.mean(axis=0))


def test_kcenter_hand_traces():
    assert sorted(kcenter_select(np.array([0.0, 5.0, 10.0]), 2, 0)) == [0, 10 // 5]
    assert kcenter_select(np.array([0.0, 1.0, 4.0, 9.0]), 3, 1) == [1, 3, 2]
    assert sorted(kcenter_select(np.arange(6.0), 6, 2)) == list(range(6))


def test_coresets_are_valid(sbm):
    train = sbm.split("train")
    for syn in (coreset_random(sbm, 30, 0), coreset_herding(sbm, 30), coreset_kcenter(sbm, 30, 0)):
        assert syn.m == 30
        A = syn.adjacency()
        assert set(np.unique(A)) <= {0.0, 1.0} and np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
        assert list(syn.class_counts()) == [10, 10, 10]
    full = coreset_random(sbm, train.size, 0)
    assert sorted(map(tuple, full.xs)) == sorted(map(tuple, sbm.features[train]))
    assert np.array_equal(coreset_random(sbm, 30, 5).xs, coreset_random(sbm, 30, 5).xs)
    assert np.array_equal(coreset_kcenter(sbm, 30, 5).xs, coreset_kcenter(sbm, 30, 5).xs)
    assert np.array_equal(coreset_herding(sbm, 30).xs, coreset_herding(sbm, 30).xs)
    with pytest.raises(StructuralError):
        coreset_random(sbm, 2, 0)
    with pytest.raises(StructuralError):
        coreset_herding(sbm, train.size + 1)


def test_coreset_proportional_histogram():
    g = gen_sbm([40, 20, 20], 0.1, 0.02, 4, seed=1)
    counts = coreset_random(g, 8, 0).class_counts()
    hist = np.bincount(g.labels[g.split("train")])
    assert np.all(np.abs(counts - 8 * hist / hist.sum()) < 1)


# -- ranking metrics ------------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(4, 60))
def test_auc_rank_equals_trapezoid(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < 0.5
    labels[:2] = [True, False]
    scores = np.round(rng.random(n), 1)  # coarse rounding forces ties
    assert abs(auc_rank(scores, labels) - auc_trapezoid(scores, labels)) <= 1e-9
    assert auc_rank(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_perfect_and_random_scorers():
    labels = np.r_[np.ones(50, bool), np.zeros(50, bool)]
    assert auc_rank(labels.astype(float), labels) == 1.0
    rng = np.random.default_rng(0)
    big = rng.random(10_000) < 0.5
    assert abs(auc_rank(rng.random(10_000), big) - 0.5) <= 0.05


def test_ap_equals_auc_on_exchangeable_toy():
    labels = np.array([True, True, False, False])
    scores = np.full(4, 0.3)
    assert average_precision(scores, labels) == auc_rank(scores, labels) == 0.5


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(30), rng.random(30) < 0.4
    p = rng.permutation(30)
    assert auc_rank(scores[p], labels[p]) == auc_rank(scores, labels)
    assert average_precision(scores[p], labels[p]) == pytest.approx(average_precision(scores, labels), abs=1e-12)


# -- reports ----------------------------------------------------------------------

def test_eval_report_shapes():
    r = EvalReport.from_values("single-task", "accuracy", [0.7], "abc")
    assert r.std == 0.0 and r.per_seed == [0.7]
    r3 = EvalReport.from_values("cross-task", "accuracy", [0.5, 0.7, 0.9], "abc")
    assert r3.std == pytest.approx(np.std([0.5, 0.7, 0.9])) and r3.std >= 0
    assert EvalReport(**json.loads(r3.to_json())) == r3
    assert summary_tsv([r, r3]).splitlines()[0].startswith("protocol\tmetric")
    with pytest.raises(ProtocolError):
        EvalReport.from_values("nonsense", "accuracy", [1.0], "abc")


# -- protocols ----------------------------------------------------------------------

def test_dim_mismatch_is_protocol_error(sbm):
    syn = SyntheticGraph(np.ones((3, 5)), np.zeros((3, 3)), np.array([0, 1, 2]), 3)
    with pytest.raises(ProtocolError, match="adapter"):
        eval_node_classification(syn, sbm, [0], QUICK)
    with pytest.raises(ProtocolError):
        eval_link_prediction(syn, sbm, [0], QUICK)


@pytest.fixture(scope="module")
def clustered():
    # near-ceiling fixture: the train-induced subgraph keeps enough neighbours
    # that training on it is a fair stand-in for masked full-graph training
    return [gen_sbm([60, 60, 60], 0.12, 0.01, 8, seed=s, feature_scale=0.6) for s in range(3)]


def test_self_consistency_with_full_train_graph(clustered):
    condensed, direct = [], []
    for g in clustered:
        train, test = g.split("train"), g.split("test")
        condensed.append(eval_node_classification(SyntheticGraph.from_subgraph(g, train), g, [0, 1, 2]).mean)
        prop = gcn_normalize(g.adjacency)
        for seed in (0, 1, 2):
            model = train_full_batch(prop, g.features, g.labels, train, hidden=64, num_classes=3, seed=seed)
            direct.append(np.mean(np.argmax(forward(model, prop, g.features)[0][test], axis=1) == g.labels[test]))
    assert abs(np.mean(condensed) - np.mean(direct)) <= 0.02


def test_random_labels_near_chance():
    # one shuffle maps whole clusters to arbitrary labels, so average over many
    g = gen_sbm([30] * 10, 0.15, 0.01, 8, seed=0, feature_scale=0.6)
    syn = SyntheticGraph.from_subgraph(g, g.split("train"))
    test = g.split("test")
    majority = np.bincount(g.labels[test]).max() / test.size
    rng = np.random.default_rng(0)
    accs = [
        eval_node_classification(SyntheticGraph(syn.xs, syn.adj_logits, rng.permutation(syn.ys), 10), g, [k], QUICK).mean
        for k in range(20)
    ]
    assert np.mean(accs) <= majority + 0.05


def test_node_eval_invariant_to_condensed_relabeling(sbm):
    syn = coreset_random(sbm, 30, 0)
    p = np.random.default_rng(2).permutation(30)
    perm = SyntheticGraph(syn.xs[p], syn.adj_logits[np.ix_(p, p)], syn.ys[p], 3)
    a = eval_node_classification(syn, sbm, [0], QUICK)
    b = eval_node_classification(perm, sbm, [0], QUICK)
    assert a.per_seed == pytest.approx(b.per_seed, abs=1e-9)
    assert a.bundle_hash == syn_hash(syn) != b.bundle_hash


def test_split_edges(sbm):
    split = split_edges(sbm, 0.1, 0)
    n_edges = sbm.num_edges()
    assert len(split.pos) == len(split.neg) == round(0.1 * n_edges)
    assert split.train_adjacency.nnz == 2 * (n_edges - len(split.pos))
    A = sbm.dense_adjacency()
    assert np.all(A[split.pos[:, 0], split.pos[:, 1]] == 1) and np.all(A[split.neg[:, 0], split.neg[:, 1]] == 0)
    assert np.all(split.train_adjacency.toarray()[split.pos[:, 0], split.pos[:, 1]] == 0)


def test_link_prediction_report(sbm):
    syn = coreset_random(sbm, 30, 0)
    r = eval_link_prediction(syn, sbm, [0, 1], QUICK)
    assert r.protocol == "cross-task" and len(r.per_seed) == 2
    assert len(r.extra["auc"]) == len(r.extra["ap"]) == 2
    assert all(0 <= v <= 1 for v in r.per_seed + r.extra["auc"] + r.extra["ap"])


def test_transfer_same_source_consistent(clustered):
    node, transfer = [], []
    for g in clustered:
        syn = SyntheticGraph.from_subgraph(g, g.split("train"))
        node.append(eval_node_classification(syn, g, [0, 1, 2]).mean)
        report = eval_transfer(syn, g, [0, 1, 2])
        assert report.protocol == "cross-dataset" and not report.adapter_used
        transfer.append(report.mean)
    assert abs(np.mean(transfer) - np.mean(node)) <= 0.03


def test_probe_on_random_encoder_beats_majority(sbm):
    W1 = init_model(sbm.d, 16, 3, seed=0).W1
    prop = gcn_normalize(sbm.adjacency)
    probe = fit_probe(W1, prop, sbm.features, sbm.labels, sbm.split("train"), 3, 0, EvalSettings())
    test = sbm.split("test")
    acc = np.mean(np.argmax(probe.logits(prop, sbm.features)[test], axis=1) == sbm.labels[test])
    assert acc >= np.bincount(sbm.labels[test]).max() / test.size


def test_adapter_engaged_iff_dims_differ(sbm):
    other = gen_sbm([20, 20, 20], 0.2, 0.02, 5, seed=3)
    syn_same = coreset_random(sbm, 30, 0)
    syn_other = coreset_random(other, 6, 0)
    assert not eval_transfer(syn_same, sbm, [0], QUICK).adapter_used
    r = eval_transfer(syn_other, sbm, [0], QUICK)
    assert r.adapter_used and r.protocol == "cross-dataset"
    both = eval_transfer(syn_other, sbm, [0], QUICK, link=True)
    assert both.protocol == "cross-both" and both.adapter_used and "auc" in both.extra
