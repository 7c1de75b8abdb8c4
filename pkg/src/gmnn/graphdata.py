"""Graph containers and dataset plumbing.

Datasets arrive as portable JSON files (nodes, undirected edges, sparse
feature triples, labels, train/val/test splits). Loading is strict: unknown
fields, out-of-range ids, overlapping splits and unlabeled train/test nodes
are rejected with the offending id in the message. In-memory graphs are
immutable and safe to share between runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .autodiff import DEFAULT_DTYPE, SparseMatrix

_DATASET_KEYS = {"num_nodes", "num_features", "num_classes",
                 "edges", "features", "labels", "splits"}
_SPLIT_KEYS = {"train", "val", "test"}


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @classmethod
    def empty(cls) -> "Split":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())


@dataclass(frozen=True)
class Graph:
    """An undirected graph with sparse node features and partial labels.

    edges holds deduplicated pairs with u < v and no self-loops. labels is
    one int per node, -1 where unknown.
    """

    num_nodes: int
    num_classes: int
    edges: np.ndarray
    features: SparseMatrix
    labels: np.ndarray
    split: Split = field(default_factory=Split.empty)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])


class LabelKind(IntEnum):
    UNSET = 0
    OBSERVED = 1
    SAMPLED = 2
    SOFT = 3


class LabelStates:
    """Per-node label bookkeeping used by the EM loop.

    Each node is unset, observed (ground truth), sampled (drawn from a
    distribution) or soft (carries a full distribution row).
    """

    def __init__(self, num_nodes: int, num_classes: int):
        self.num_classes = int(num_classes)
        self.kinds = np.zeros(num_nodes, dtype=np.uint8)
        self.hard = np.full(num_nodes, -1, dtype=np.int64)
        self.soft = None

    def _soft_buffer(self) -> np.ndarray:
        if self.soft is None:
            self.soft = np.zeros((self.kinds.size, self.num_classes), dtype=np.float64)
        return self.soft

    def set_observed(self, idx, classes) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        self.kinds[idx] = LabelKind.OBSERVED
        self.hard[idx] = np.asarray(classes, dtype=np.int64)

    def set_sampled(self, idx, classes) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        self.kinds[idx] = LabelKind.SAMPLED
        self.hard[idx] = np.asarray(classes, dtype=np.int64)

    def set_soft(self, idx, rows) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        self.kinds[idx] = LabelKind.SOFT
        self.hard[idx] = -1
        self._soft_buffer()[idx] = rows


def make_label_features(states: LabelStates, num_classes: int | None = None,
                        dtype=DEFAULT_DTYPE) -> np.ndarray:
    """One row per node: one-hot for observed/sampled, the stored row for
    soft, all zeros for unset."""
    k = states.num_classes if num_classes is None else int(num_classes)
    n = states.kinds.size
    out = np.zeros((n, k), dtype=dtype)
    hard_mask = (states.kinds == LabelKind.OBSERVED) | (states.kinds == LabelKind.SAMPLED)
    idx = np.flatnonzero(hard_mask)
    out[idx, states.hard[idx]] = 1
    if states.soft is not None:
        soft_idx = np.flatnonzero(states.kinds == LabelKind.SOFT)
        out[soft_idx] = states.soft[soft_idx]
    return out


def one_hot(labels, num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    known = labels >= 0
    out[np.flatnonzero(known), labels[known]] = 1
    return out


# ---------------------------------------------------------------------------
# portable files


def _as_index_array(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        bad = arr[(arr < 0) | (arr >= n)][0]
        raise ValueError(f"{what}: node id {bad} out of range [0, {n})")
    return arr


def load_dataset(path) -> Graph:
    """Read a portable dataset file into a Graph.

    Duplicate edges are collapsed and explicit self-loops dropped; any other
    irregularity (unknown fields, bad ids, duplicate feature entries,
    overlapping splits, unlabeled train/test nodes) raises ValueError.
    """
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("dataset file must hold a JSON object")
    unknown = set(raw) - _DATASET_KEYS
    if unknown:
        raise ValueError(f"unknown dataset fields: {sorted(unknown)}")
    missing = _DATASET_KEYS - set(raw)
    if missing:
        raise ValueError(f"missing dataset fields: {sorted(missing)}")

    n = int(raw["num_nodes"])
    num_feat = int(raw["num_features"])
    num_classes = int(raw["num_classes"])
    if n < 1:
        raise ValueError("num_nodes must be positive")
    if num_feat < 0 or num_classes < 0:
        raise ValueError("num_features and num_classes must be non-negative")

    edges = np.asarray(raw["edges"], dtype=np.int64).reshape(-1, 2)
    if edges.size:
        _as_index_array(edges.ravel(), n, "edges")
        lo = edges.min(axis=1)
        hi = edges.max(axis=1)
        keep = lo != hi  # drop self-loops
        edges = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)

    triples = raw["features"]
    if triples:
        t = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
        f_nodes = t[:, 0].astype(np.int64)
        f_idx = t[:, 1].astype(np.int64)
        f_val = t[:, 2]
        _as_index_array(f_nodes, n, "features")
        if f_idx.size and (f_idx.min() < 0 or f_idx.max() >= num_feat):
            raise ValueError("features: feature index out of range")
        keys = f_nodes * num_feat + f_idx
        if np.unique(keys).size != keys.size:
            keys_sorted = np.sort(keys)
            dup = keys_sorted[np.flatnonzero(keys_sorted[1:] == keys_sorted[:-1])[0]]
            raise ValueError(f"features: duplicate entry for node {dup // num_feat}, "
                             f"index {dup % num_feat}")
        features = SparseMatrix.from_coo(f_nodes, f_idx, f_val.astype(DEFAULT_DTYPE),
                                         (n, num_feat))
    else:
        features = SparseMatrix.from_coo([], [], np.zeros(0, dtype=DEFAULT_DTYPE),
                                         (n, num_feat))

    labels = np.full(n, -1, dtype=np.int64)
    pair_list = raw["labels"]
    if pair_list:
        pairs = np.asarray(pair_list, dtype=np.int64).reshape(-1, 2)
        _as_index_array(pairs[:, 0], n, "labels")
        if np.unique(pairs[:, 0]).size != pairs.shape[0]:
            raise ValueError("labels: node labeled more than once")
        if pairs.size and (pairs[:, 1].min() < 0 or pairs[:, 1].max() >= num_classes):
            raise ValueError("labels: class id out of range")
        labels[pairs[:, 0]] = pairs[:, 1]

    splits_raw = raw["splits"]
    if not isinstance(splits_raw, dict) or set(splits_raw) != _SPLIT_KEYS:
        raise ValueError("splits must hold exactly train, val and test")
    parts = {k: _as_index_array(splits_raw[k], n, f"splits.{k}") for k in ("train", "val", "test")}
    for name, arr in parts.items():
        if np.unique(arr).size != arr.size:
            raise ValueError(f"splits.{name} contains repeated node ids")
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        overlap = np.intersect1d(parts[a], parts[b])
        if overlap.size:
            raise ValueError(f"split overlap: node {overlap[0]} in both {a} and {b}")
    for name in ("train", "test"):
        unlabeled = parts[name][labels[parts[name]] < 0]
        if unlabeled.size:
            raise ValueError(f"splits.{name}: node {unlabeled[0]} has no label")

    for arr in (edges, labels, *parts.values()):
        arr.setflags(write=False)
    return Graph(num_nodes=n, num_classes=num_classes, edges=edges,
                 features=features, labels=labels,
                 split=Split(parts["train"], parts["val"], parts["test"]))


def write_dataset(g: Graph, path) -> None:
    """Serialize a Graph back to the portable format (deterministic bytes)."""
    row_of = np.repeat(np.arange(g.num_nodes), np.diff(g.features.indptr))
    triples = [[int(r), int(c), float(v)] for r, c, v in
               zip(row_of, g.features.indices, g.features.values)]
    labeled = np.flatnonzero(g.labels >= 0)
    doc = {
        "num_nodes": g.num_nodes,
        "num_features": g.num_features,
        "num_classes": g.num_classes,
        "edges": [[int(u), int(v)] for u, v in g.edges],
        "features": triples,
        "labels": [[int(i), int(g.labels[i])] for i in labeled],
        "splits": {k: [int(i) for i in getattr(g.split, k)]
                   for k in ("train", "val", "test")},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# transforms


def binarize_features(g: Graph) -> Graph:
    """Replace positive feature values with 1 and drop the rest."""
    f = g.features
    keep = f.values > 0
    row_of = np.repeat(np.arange(f.shape[0]), np.diff(f.indptr))
    features = SparseMatrix.from_coo(row_of[keep], f.indices[keep],
                                     np.ones(int(keep.sum()), dtype=f.values.dtype),
                                     f.shape)
    return Graph(num_nodes=g.num_nodes, num_classes=g.num_classes, edges=g.edges,
                 features=features, labels=g.labels, split=g.split)


def normalize_adjacency(g: Graph, add_self_loops: bool = True,
                        dtype=DEFAULT_DTYPE) -> SparseMatrix:
    """Symmetrically normalized adjacency D^-1/2 (A [+ I]) D^-1/2.

    With self-loops every node has degree >= 1; without them, rows of
    isolated nodes stay all-zero.
    """
    n = g.num_nodes
    if g.edges.size:
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    else:
        rows = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
    if add_self_loops:
        diag = np.arange(n, dtype=np.int64)
        rows = np.concatenate([rows, diag])
        cols = np.concatenate([cols, diag])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    inv_sqrt = np.zeros(n, dtype=np.float64)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    vals = (inv_sqrt[rows] * inv_sqrt[cols]).astype(dtype)
    return SparseMatrix.from_coo(rows, cols, vals, (n, n))


def line_graph_from_edges(edge_list: np.ndarray, num_nodes: int,
                          num_classes: int = 2) -> Graph:
    """Line graph over an explicit edge record list.

    Each record becomes a node; two records are adjacent when they share an
    endpoint. Features are two-endpoint indicator rows of width num_nodes.
    Records may repeat a pair (parallel records stay distinct nodes); the
    resulting line-edges are deduplicated.
    """
    edge_list = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    m = edge_list.shape[0]
    if m == 0:
        raise ValueError("line graph needs at least one edge")
    if np.any(edge_list[:, 0] == edge_list[:, 1]):
        raise ValueError("line graph input may not contain self-loops")
    if edge_list.min() < 0 or edge_list.max() >= num_nodes:
        raise ValueError("line graph input references a node out of range")

    endpoint = np.concatenate([edge_list[:, 0], edge_list[:, 1]])
    edge_id = np.concatenate([np.arange(m), np.arange(m)])
    order = np.argsort(endpoint, kind="stable")
    endpoint, edge_id = endpoint[order], edge_id[order]
    counts = np.bincount(endpoint, minlength=num_nodes)
    starts = np.concatenate([[0], np.cumsum(counts)])

    triu_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    pair_blocks = []
    for v in np.flatnonzero(counts >= 2):
        d = int(counts[v])
        if d not in triu_cache:
            triu_cache[d] = np.triu_indices(d, 1)
        ii, jj = triu_cache[d]
        members = edge_id[starts[v]:starts[v] + d]
        pair_blocks.append(np.stack([members[ii], members[jj]], axis=1))
    if pair_blocks:
        pairs = np.concatenate(pair_blocks, axis=0)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        line_edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        line_edges = np.zeros((0, 2), dtype=np.int64)

    ind_rows = np.repeat(np.arange(m), 2)
    ind_cols = np.sort(edge_list, axis=1).ravel()
    features = SparseMatrix.from_coo(ind_rows, ind_cols,
                                     np.ones(2 * m, dtype=DEFAULT_DTYPE),
                                     (m, num_nodes))
    return Graph(num_nodes=m, num_classes=num_classes, edges=line_edges,
                 features=features, labels=np.full(m, -1, dtype=np.int64),
                 split=Split.empty())


def build_line_graph(g: Graph, num_classes: int = 2) -> Graph:
    """Line graph of a Graph's (deduplicated) edge set."""
    return line_graph_from_edges(g.edges, g.num_nodes, num_classes)
