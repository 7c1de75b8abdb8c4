"""Converter for the legacy pickled citation-graph distribution.

The upstream layout ships eight files per dataset, ind.<name>.{x,y,tx,ty,
allx,ally,graph,test.index}: pickled sparse feature blocks and one-hot
label blocks for the labeled core (x/y), the test block (tx/ty) and the
full non-test block (allx/ally), a pickled adjacency dict over all nodes,
and a plain-text list giving each tx row's position in the full graph.
Pickles are Python-2 era, so they are read latin1-encoded through a
restricted unpickler that also maps legacy scipy module paths onto the
current public namespace.

Node ids: the non-test block occupies 0..len(allx)-1 and the test block
the contiguous range after it. test.index rows are shuffled relative to
that range; rows are re-ordered so node id matches file position. Index
values inside the range that never appear in test.index (isolated
placeholder nodes in one distribution) get an empty feature row, no label
and membership in no split.

Edge counting: the adjacency dict is symmetrized and deduplicated, so the
emitted structural count is the number of unique undirected pairs. The
figures usually quoted for these datasets count the raw citation records
instead and are slightly higher; the expectations below pin the structural
counts this distribution actually contains.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

from .common import ConversionError, validate_portable, write_json, write_manifest

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph", "test.index")

_SAFE_MODULES = ("numpy", "scipy.sparse", "collections", "builtins",
                 "__builtin__", "copy_reg", "copyreg", "_codecs")


class _Unpickler(pickle.Unpickler):
    def find_class(self, module, name):
        if module.startswith("scipy.sparse"):
            # legacy pickles name private/renamed submodules; every sparse
            # class is reachable from the package root
            return getattr(scipy.sparse, name)
        if module.split(".")[0] in _SAFE_MODULES or module in _SAFE_MODULES:
            return super().find_class(module, name)
        raise ConversionError(f"refusing to unpickle {module}.{name}")


def _load_pickle(path: Path):
    with open(path, "rb") as fh:
        return _Unpickler(fh, encoding="latin1").load()


def _dense(block, what: str) -> np.ndarray:
    if scipy.sparse.issparse(block):
        block = block.todense()
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim != 2:
        raise ConversionError(f"{what} block must be 2-D")
    return arr


@dataclass(frozen=True)
class Expectation:
    nodes: int
    edges: int          # unique undirected pairs in the adjacency dict
    features: int
    classes: int
    train: int
    val: int
    test: int


EXPECTED = {
    "cora": Expectation(2708, 5278, 1433, 7, 140, 500, 1000),
    "citeseer": Expectation(3327, 4552, 3703, 6, 120, 500, 1000),
    "pubmed": Expectation(19717, 44324, 500, 3, 60, 500, 1000),
}

_AUTO = object()


def convert_planetoid(src_dir, name: str, out_path, val_size: int | None = None,
                      expect=_AUTO) -> dict:
    """Write the portable file plus its manifest; returns a summary dict.

    val_size defaults to the expectation for the named dataset (500 when
    converting an unrecognized name with expect=None).
    """
    if expect is _AUTO:
        expect = EXPECTED.get(name)
    if val_size is None:
        val_size = expect.val if expect is not None else 500
    src_dir = Path(src_dir)
    paths = {part: src_dir / f"ind.{name}.{part}" for part in PARTS}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise ConversionError(f"missing upstream files: {missing}")

    x = _dense(_load_pickle(paths["x"]), "x")
    y = _dense(_load_pickle(paths["y"]), "y")
    tx = _dense(_load_pickle(paths["tx"]), "tx")
    ty = _dense(_load_pickle(paths["ty"]), "ty")
    allx = _dense(_load_pickle(paths["allx"]), "allx")
    ally = _dense(_load_pickle(paths["ally"]), "ally")
    graph = _load_pickle(paths["graph"])
    if not isinstance(graph, dict):
        raise ConversionError("graph block must be an adjacency dict")
    try:
        test_reorder = np.asarray([int(line) for line in
                                   paths["test.index"].read_text().split()],
                                  dtype=np.int64)
    except ValueError as exc:
        raise ConversionError(f"bad test.index: {exc}") from None

    if x.shape[0] != y.shape[0] or tx.shape[0] != ty.shape[0] \
            or allx.shape[0] != ally.shape[0]:
        raise ConversionError("feature/label block row counts disagree")
    if not (x.shape[1] == tx.shape[1] == allx.shape[1]):
        raise ConversionError("feature dimensions disagree between blocks")
    if not (y.shape[1] == ty.shape[1] == ally.shape[1]):
        raise ConversionError("class counts disagree between blocks")
    if test_reorder.size != tx.shape[0]:
        raise ConversionError("test.index length does not match the test block")
    if np.unique(test_reorder).size != test_reorder.size:
        raise ConversionError("test.index repeats a position")

    test_sorted = np.sort(test_reorder)
    lo, hi = int(test_sorted[0]), int(test_sorted[-1])
    core = allx.shape[0]
    if lo != core:
        raise ConversionError("test block must directly follow the non-test block")
    num_nodes = core + (hi - lo + 1)
    dim = x.shape[1]
    num_classes = y.shape[1]

    feats = np.zeros((num_nodes, dim))
    feats[:core] = allx
    feats[test_sorted] = tx           # sorted placement first,
    feats[test_reorder] = feats[test_sorted]  # then undo the file shuffle

    onehot = np.zeros((num_nodes, num_classes))
    onehot[:core] = ally
    onehot[test_sorted] = ty
    onehot[test_reorder] = onehot[test_sorted]
    hot = onehot.sum(axis=1)
    if not np.all((hot == 0) | (hot == 1)):
        raise ConversionError("label block rows must be one-hot or empty")
    labels = np.where(hot > 0, np.argmax(onehot, axis=1), -1)

    if len(graph) != num_nodes:
        raise ConversionError(f"adjacency dict covers {len(graph)} nodes, "
                              f"blocks imply {num_nodes}")
    pairs = [(u, v) for u, nbrs in graph.items() for v in nbrs]
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ConversionError("adjacency dict references a node out of range")
    lo_ids, hi_ids = arr.min(axis=1), arr.max(axis=1)
    keep = lo_ids != hi_ids
    edges = np.unique(np.stack([lo_ids[keep], hi_ids[keep]], axis=1), axis=0)

    train = np.arange(x.shape[0])
    val = np.arange(x.shape[0], x.shape[0] + val_size)
    if val.size and val[-1] >= lo:
        raise ConversionError("validation range would run into the test block")
    if np.any(labels[train] < 0) or np.any(labels[test_sorted] < 0):
        raise ConversionError("train/test node without a label")

    rows, cols = np.nonzero(feats)
    doc = {
        "num_nodes": int(num_nodes),
        "num_features": int(dim),
        "num_classes": int(num_classes),
        "edges": [[int(u), int(v)] for u, v in edges],
        "features": [[int(r), int(c), float(feats[r, c])]
                     for r, c in zip(rows, cols)],
        "labels": [[int(i), int(labels[i])] for i in np.flatnonzero(labels >= 0)],
        "splits": {"train": [int(i) for i in train],
                   "val": [int(i) for i in val],
                   "test": [int(i) for i in test_sorted]},
    }
    validate_portable(doc)

    if expect is not None:
        got = Expectation(nodes=num_nodes, edges=len(edges), features=dim,
                          classes=num_classes, train=train.size, val=val.size,
                          test=test_sorted.size)
        if got != expect:
            raise ConversionError(f"{name}: counts {got} do not match the "
                                  f"expected {expect}")

    out_path = Path(out_path)
    data = write_json(doc, out_path)
    manifest = write_manifest("planetoid", paths.values(), out_path, data)
    return {"output": out_path, "manifest": manifest, "nodes": num_nodes,
            "edges": len(edges), "labeled": int(np.sum(labels >= 0))}
