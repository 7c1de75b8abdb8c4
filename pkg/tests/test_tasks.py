"""Driver-level checks: metrics, aggregation, report schema, and each task
driver on miniature inputs."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

from gmnn import (EMConfig, Graph, LinkTaskSpec, LPConfig, ProbeConfig,
                  RunResult, SparseMatrix, Split, aggregate, binary_f1,
                  linear_probe, load_weighted_edges, neighbor_targets,
                  render_mean_std, run_link_classification,
                  run_object_classification, run_unsupervised)
from gmnn.tasks import topk_rows

sys.path.insert(0, str(Path(__file__).parent))
from synthdata import sbm_classification, trust_network_links  # noqa: E402


# ---------------------------------------------------------------------------
# metrics


def test_binary_f1_hand_values():
    truth = np.array([1, 1, 0, 0])
    always_pos = np.ones(4, dtype=np.int64)
    # precision 1/2, recall 1 for the positive class
    assert binary_f1(always_pos, truth, 1) == pytest.approx(2 / 3)
    assert binary_f1(always_pos, truth, 0) == 0.0
    assert binary_f1(truth, truth, 0) == 1.0
    assert binary_f1(np.zeros(3), np.zeros(3), 1) == 0.0  # nothing to score


def test_aggregate_mean_and_sample_std():
    mean, std = aggregate([0.8, 0.9])
    assert mean == pytest.approx(0.85)
    assert std == pytest.approx(np.std([0.8, 0.9], ddof=1))
    assert aggregate([0.5]) == (0.5, 0.0)
    with pytest.raises(ValueError):
        aggregate([])


def test_render_mean_std_format():
    assert render_mean_std(0.83675, 0.009) == "83.675 ± 0.900"
    assert render_mean_std(0.5, 0.0, decimals=1) == "50.0 ± 0.0"


def test_run_result_report_schema_and_bytes():
    r = RunResult(task="object", method="gcn", config={"lr": 0.05},
                  seeds=[0, 1], per_seed=[0.8, 0.9])
    doc = r.to_report()
    assert set(doc) == {"task", "method", "config", "seeds", "per_seed",
                        "mean", "std"}
    assert r.mean == pytest.approx(0.85)
    text = r.to_json()
    assert text.endswith("\n")
    assert json.loads(text) == doc
    assert text == RunResult(**{**r.__dict__}).to_json()  # byte-stable


# ---------------------------------------------------------------------------
# unsupervised pieces


def test_neighbor_targets_uniform_rows_and_isolated_self():
    g = Graph(num_nodes=4, num_classes=2,
              edges=np.array([[0, 1], [0, 2]]),
              features=SparseMatrix.identity(4),
              labels=np.full(4, -1, dtype=np.int64))
    t = neighbor_targets(g).to_dense()
    np.testing.assert_allclose(t[0], [0, 0.5, 0.5, 0])
    np.testing.assert_allclose(t[1], [1, 0, 0, 0])
    np.testing.assert_allclose(t[3], [0, 0, 0, 1])  # isolated points at itself
    np.testing.assert_allclose(t.sum(axis=1), 1.0)


def test_topk_rows_truncates_and_renormalizes():
    rows = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]], dtype=np.float32)
    out = topk_rows(rows, 2)
    assert isinstance(out, SparseMatrix)
    dense = out.to_dense()
    np.testing.assert_allclose(dense[0], [0.625, 0.375, 0.0], rtol=1e-6)
    assert dense[1, 2] == pytest.approx(0.8 / 0.9, rel=1e-6)
    np.testing.assert_allclose(dense.sum(axis=1), 1.0, rtol=1e-6)


def test_linear_probe_separable_and_noise():
    rng = np.random.default_rng(0)
    n = 90
    labels = (np.arange(n) % 3).astype(np.int64)
    perm = rng.permutation(n)
    split = Split(np.sort(perm[:30]), np.sort(perm[30:60]), np.sort(perm[60:]))
    separable = np.eye(3, dtype=np.float32)[labels] + \
        rng.normal(0, 0.05, (n, 3)).astype(np.float32)
    assert linear_probe(separable, labels, split, ProbeConfig(epochs=150)) > 0.9
    noise = rng.normal(size=(n, 8)).astype(np.float32)
    assert linear_probe(noise, labels, split, ProbeConfig(epochs=50)) < 0.7


# ---------------------------------------------------------------------------
# link task plumbing


def test_link_spec_thresholds():
    edges = np.array([[0, 1, 5.0], [1, 2, -6.0], [2, 3, 2.0], [3, 0, -3.0]])
    spec = LinkTaskSpec(num_nodes=4, edges=edges)
    np.testing.assert_array_equal(spec.labels(), [1, 0, -1, -1])
    wide = LinkTaskSpec(num_nodes=4, edges=edges, pos_threshold=1.0,
                        neg_threshold=-1.0)
    np.testing.assert_array_equal(wide.labels(), [1, 0, 1, 0])


def test_load_weighted_edges_strict(tmp_path):
    p = tmp_path / "w.json"
    p.write_text(json.dumps({"num_nodes": 3, "edges": [[0, 1, 4.5], [1, 2, -7.0]]}))
    spec = load_weighted_edges(p, train_size=1, val_size=1)
    assert spec.num_nodes == 3 and spec.train_size == 1
    np.testing.assert_allclose(spec.edges[:, 2], [4.5, -7.0])
    p.write_text(json.dumps({"num_nodes": 3, "edges": [], "extra": 1}))
    with pytest.raises(ValueError):
        load_weighted_edges(p)
    p.write_text(json.dumps({"num_nodes": 2, "edges": [[0, 5, 1.0]]}))
    with pytest.raises(ValueError):
        load_weighted_edges(p)


def test_link_driver_scores_minority_class():
    rng = np.random.default_rng(0)
    m = 120
    edges = np.zeros((m, 3))
    edges[:, 0] = rng.integers(0, 20, m)
    edges[:, 1] = (edges[:, 0] + 1 + rng.integers(0, 18, m)) % 20
    edges[:, 2] = np.where(rng.random(m) < 0.8, 5.0, -5.0)  # negatives rare
    spec = LinkTaskSpec(num_nodes=20, edges=edges, train_size=30, val_size=30)
    cfg = EMConfig(optimizer="adam", lr=0.05, weight_decay=0.0, hidden=8,
                   input_dropout=0.0, epochs_pretrain=5, epochs_p=2, epochs_q=2,
                   max_iterations=1, binarize=False)
    res = run_link_classification(spec, "gcn", cfg, seeds=[0])
    assert res.config["scored_class"] == 0
    assert 0.0 <= res.per_seed[0] <= 1.0
    with pytest.raises(ValueError):
        run_link_classification(spec, "nonsense", cfg, seeds=[0])


def test_link_driver_ignores_self_ratings():
    rng = np.random.default_rng(3)
    m = 90
    edges = np.zeros((m, 3))
    edges[:, 0] = rng.integers(0, 15, m)
    edges[:, 1] = (edges[:, 0] + 1 + rng.integers(0, 13, m)) % 15
    edges[:, 2] = np.where(rng.random(m) < 0.75, 5.0, -5.0)
    with_loops = np.vstack([edges, [[4, 4, 9.0], [8, 8, -9.0]]])
    cfg = EMConfig(optimizer="adam", lr=0.05, weight_decay=0.0, hidden=8,
                   input_dropout=0.0, epochs_pretrain=5, epochs_p=2, epochs_q=2,
                   max_iterations=1, binarize=False)
    kw = dict(train_size=25, val_size=25)
    a = run_link_classification(LinkTaskSpec(num_nodes=15, edges=edges, **kw),
                                "gcn", cfg, seeds=[0])
    b = run_link_classification(LinkTaskSpec(num_nodes=15, edges=with_loops, **kw),
                                "gcn", cfg, seeds=[0])
    # self-ratings have no counterparty; they must not shift the run at all
    assert b.per_seed == a.per_seed


def test_link_driver_needs_enough_labels():
    edges = np.array([[0, 1, 5.0], [1, 2, 5.0]])
    spec = LinkTaskSpec(num_nodes=3, edges=edges, train_size=100, val_size=10)
    with pytest.raises(ValueError):
        run_link_classification(spec, "gcn", EMConfig(), seeds=[0])


# ---------------------------------------------------------------------------
# object driver


def small_sbm():
    return sbm_classification(n=60, num_classes=3, labels_per_class=4,
                              val_per_class=5, feat_dim=12, active_per_class=4,
                              feat_on=0.7, noise_on=0.05, seed=1)


def quick_cfg(**kw):
    base = dict(epochs_pretrain=8, epochs_p=3, epochs_q=3, max_iterations=1)
    base.update(kw)
    return EMConfig(**base)


def test_object_driver_all_methods_run():
    g = small_sbm()
    cfg = quick_cfg(hidden=8)
    for method in ("gmnn", "gcn", "self-train", "gmnn-nonamortized"):
        res = run_object_classification(g, method, cfg, seeds=[0], dataset="mini")
        assert res.task == "object" and res.method == method
        assert 0.0 <= res.per_seed[0] <= 1.0
        assert res.config["dataset"] == "mini"
    lp = run_object_classification(g, "lp", cfg, seeds=[0, 1],
                                   lp_cfg=LPConfig(alpha=0.9, iterations=30))
    assert lp.per_seed[0] == lp.per_seed[1]  # propagation ignores the seed
    with pytest.raises(ValueError):
        run_object_classification(g, "svm", cfg, seeds=[0])


def test_object_driver_parallel_matches_serial():
    g = small_sbm()
    cfg = quick_cfg(hidden=8)
    serial = run_object_classification(g, "gcn", cfg, seeds=[0, 1])
    twice = run_object_classification(g, "gcn", cfg, seeds=[0, 1], parallel=2)
    assert serial.to_json() == twice.to_json()


def test_object_driver_gcn_is_gmnn_without_iterations():
    g = small_sbm()
    cfg = quick_cfg(hidden=8, max_iterations=3)
    gcn = run_object_classification(g, "gcn", cfg, seeds=[0])
    plain = run_object_classification(g, "gmnn", cfg.replace(max_iterations=0),
                                      seeds=[0])
    assert gcn.per_seed == plain.per_seed


# ---------------------------------------------------------------------------
# unsupervised driver


def test_unsup_driver_shapes_and_shared_pretrain():
    g = small_sbm()
    cfg = EMConfig(strategy="mean_pool", optimizer="adam", lr=0.05,
                   weight_decay=0.0, hidden=8, input_dropout=0.0,
                   epochs_pretrain=10, epochs_p=4, epochs_q=4,
                   max_iterations=1, q_arch="gc2-linear", p_arch="gc2-linear")
    probe = ProbeConfig(epochs=40)
    out = run_unsupervised(g, cfg, seeds=[0, 1], probe_cfg=probe, dataset="mini")
    assert set(out) == {"gcn", "gmnn"}
    for r in out.values():
        assert all(0.0 <= v <= 1.0 for v in r.per_seed)
        assert r.config["probe"]["epochs"] == 40
    again = run_unsupervised(g, cfg, seeds=[0, 1], probe_cfg=probe, dataset="mini")
    assert out["gcn"].to_json() == again["gcn"].to_json()
    assert out["gmnn"].to_json() == again["gmnn"].to_json()


def test_unsup_driver_topk_path():
    g = small_sbm()
    cfg = EMConfig(strategy="mean_pool", optimizer="adam", lr=0.05,
                   weight_decay=0.0, hidden=8, input_dropout=0.0,
                   epochs_pretrain=6, epochs_p=3, epochs_q=3,
                   max_iterations=1, q_arch="gc2-linear", p_arch="gc2-linear")
    out = run_unsupervised(g, cfg, seeds=[0], probe_cfg=ProbeConfig(epochs=20),
                           topk=4)
    assert out["gmnn"].config["topk"] == 4
    assert 0.0 <= out["gmnn"].per_seed[0] <= 1.0
