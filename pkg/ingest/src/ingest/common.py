"""Shared plumbing: deterministic serialization, schema self-check, manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

PORTABLE_KEYS = {"num_nodes", "num_features", "num_classes", "edges",
                 "features", "labels", "splits"}


class ConversionError(Exception):
    """Unusable upstream input, or output that fails its own expectations."""


def validate_portable(doc: dict) -> None:
    """Check the assembled document against the portable-format rules.

    Deliberately re-states the consumer's contract instead of importing it:
    the emitted JSON is the only coupling between the two packages.
    """
    if set(doc) != PORTABLE_KEYS:
        raise ConversionError(f"portable document keys wrong: {sorted(doc)}")
    n = doc["num_nodes"]
    if n < 1:
        raise ConversionError("num_nodes must be positive")
    for u, v in doc["edges"]:
        if not (0 <= u < v < n):
            raise ConversionError(f"bad edge [{u}, {v}]")
    for node, idx, _val in doc["features"]:
        if not (0 <= node < n and 0 <= idx < doc["num_features"]):
            raise ConversionError(f"feature entry out of range: node {node}, index {idx}")
    labeled = {}
    for node, cls in doc["labels"]:
        if not (0 <= node < n and 0 <= cls < doc["num_classes"]):
            raise ConversionError(f"label out of range: node {node}, class {cls}")
        if node in labeled:
            raise ConversionError(f"node {node} labeled twice")
        labeled[node] = cls
    splits = doc["splits"]
    if set(splits) != {"train", "val", "test"}:
        raise ConversionError("splits must hold exactly train, val and test")
    seen: set = set()
    for name, part in splits.items():
        ids = set(part)
        if len(ids) != len(part):
            raise ConversionError(f"splits.{name} repeats a node")
        if ids & seen:
            raise ConversionError(f"splits.{name} overlaps another split")
        if any(not 0 <= i < n for i in ids):
            raise ConversionError(f"splits.{name} references a node out of range")
        if name in ("train", "test") and not ids <= set(labeled):
            raise ConversionError(f"splits.{name} contains an unlabeled node")
        seen |= ids


def write_json(doc: dict, path) -> bytes:
    """Serialize with sorted keys and no whitespace; returns the bytes written."""
    data = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


@dataclass(frozen=True)
class ConversionManifest:
    source: str          # planetoid | bitcoin-csv
    inputs: list
    output: str
    sha256: str


def write_manifest(source: str, inputs, out_path, data: bytes) -> Path:
    out_path = Path(out_path)
    manifest = ConversionManifest(source=source,
                                  inputs=sorted(str(p) for p in inputs),
                                  output=out_path.name,
                                  sha256=hashlib.sha256(data).hexdigest())
    path = out_path.with_name(out_path.stem + ".manifest.json")
    write_json(asdict(manifest), path)
    return path
