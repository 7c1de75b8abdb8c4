"""Converter for signed trust-rating CSVs.

Input rows are (source, target, rating, time) with arbitrary integer node
ids. Output is a pair of files: a portable node-graph file whose edges are
the unique undirected pairs (self-ratings dropped), and a weighted-edge
sidecar holding every raw directed record in file order, since the link
task builds one line-graph node per record. The quoted edge counts for
the known datasets refer to raw records, which is what the sidecar
preserves; ids are remapped to 0..n-1 in ascending order of the original
ids so conversion is deterministic.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .common import ConversionError, validate_portable, write_json, write_manifest

# recognized distributions, keyed by raw record count
EXPECTED_NODES = {24186: 3783, 35592: 5881}


def convert_bitcoin(csv_path, out_path, pos: float = 3.0, neg: float = -3.0) -> dict:
    """Write portable file, weights sidecar and manifests; returns a summary."""
    if neg >= pos:
        raise ConversionError(f"thresholds must satisfy neg < pos, got "
                              f"{neg} >= {pos}")
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ConversionError(f"missing input: {csv_path}")

    raw = []
    with open(csv_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise ConversionError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                raw.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError:
                raise ConversionError(f"line {lineno}: unparseable row "
                                      f"{','.join(row)!r}") from None
    if not raw:
        raise ConversionError(f"{csv_path} holds no records")

    ids = sorted({u for u, _, _ in raw} | {v for _, v, _ in raw})
    remap = {original: i for i, original in enumerate(ids)}
    n = len(ids)
    records = [[remap[u], remap[v], w] for u, v, w in raw]

    pairs = np.asarray([[r[0], r[1]] for r in records], dtype=np.int64)
    lo, hi = pairs.min(axis=1), pairs.max(axis=1)
    keep = lo != hi
    edges = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)

    expected = EXPECTED_NODES.get(len(records))
    if expected is not None and n != expected:
        raise ConversionError(f"{len(records)} records imply a known dataset "
                              f"with {expected} nodes, found {n}")

    doc = {
        "num_nodes": n,
        "num_features": 0,
        "num_classes": 2,
        "edges": [[int(u), int(v)] for u, v in edges],
        "features": [],
        "labels": [],
        "splits": {"train": [], "val": [], "test": []},
    }
    validate_portable(doc)

    out_path = Path(out_path)
    data = write_json(doc, out_path)
    manifest = write_manifest("bitcoin-csv", [csv_path], out_path, data)

    sidecar_path = out_path.with_name(out_path.stem + ".weights.json")
    side = write_json({"num_nodes": n, "edges": records}, sidecar_path)
    side_manifest = write_manifest("bitcoin-csv", [csv_path], sidecar_path, side)

    weights = np.asarray([r[2] for r in records])
    return {"output": out_path, "sidecar": sidecar_path,
            "manifests": [manifest, side_manifest], "nodes": n,
            "records": len(records), "edges": len(edges),
            "labeled": int(np.sum((weights > pos) | (weights < neg)))}
