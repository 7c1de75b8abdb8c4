"""Graph neural network models built on the autodiff engine.

A model is a stack of layers: graph convolutions (normalized-adjacency
message passing around an affine map), plain linear layers, and a
weightless mean-pool layer. The same stack serves two roles: an inference
network reading node attributes, and a label-dependency network reading
neighbor label vectors (optionally concatenated with attributes).
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass

import numpy as np

from .autodiff import (DEFAULT_DTYPE, SparseMatrix, Tensor, add, add_bias,
                       affine, dropout, relu, sparse_dropout, spmm)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                  # gc | linear | mean_pool
    in_dim: int
    out_dim: int
    activation: str | None = None   # relu | None

    def __post_init__(self):
        if self.kind not in ("gc", "linear", "mean_pool"):
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if self.activation not in (None, "relu"):
            raise ValueError(f"unknown activation: {self.activation!r}")
        if self.kind == "mean_pool" and self.in_dim != self.out_dim:
            raise ValueError("mean_pool does not change the width")


def make_layer_specs(arch: str, in_dim: int, hidden: int, out_dim: int) -> list[LayerSpec]:
    """Expand an architecture name into layer specs.

    gcN: N graph convolutions (relu between), linearN likewise without
    propagation, mean_pool1: weightless pooling plus a linear head,
    gcN-linear: N convolutions followed by a linear head.
    """
    m = re.fullmatch(r"(gc|linear)(\d+)(-linear)?", arch)
    if arch == "mean_pool1":
        return [LayerSpec("mean_pool", in_dim, in_dim),
                LayerSpec("linear", in_dim, out_dim)]
    if not m:
        raise ValueError(f"unknown architecture: {arch!r}")
    kind, depth, head = m.group(1), int(m.group(2)), bool(m.group(3))
    if depth < 1:
        raise ValueError("architecture needs at least one layer")
    widths = [in_dim] + [hidden] * (depth - 1 + (1 if head else 0)) + ([] if head else [out_dim])
    specs = [LayerSpec(kind, widths[i], widths[i + 1],
                       "relu" if (i < depth - 1 or head) else None)
             for i in range(depth)]
    if head:
        specs.append(LayerSpec("linear", hidden, out_dim))
    return specs


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class GnnModel:
    """A layer stack with its parameters.

    input_split optionally divides the first layer's input into blocks
    (e.g. label vectors next to attributes); each block gets its own weight
    slice so sparse blocks can stay sparse.
    """

    def __init__(self, specs, *, input_split=None, input_dropout: float = 0.0,
                 dtype=DEFAULT_DTYPE, rng: np.random.Generator | None = None):
        if not specs:
            raise ValueError("model needs at least one layer")
        self.specs = list(specs)
        self.input_dropout = float(input_dropout)
        self.dtype = np.dtype(dtype)
        first = self.specs[0]
        if input_split is None:
            input_split = (first.in_dim,)
        input_split = tuple(int(w) for w in input_split)
        if sum(input_split) != first.in_dim or any(w <= 0 for w in input_split):
            raise ValueError(f"input_split {input_split} must partition {first.in_dim}")
        self.input_split = input_split
        if rng is None:
            rng = np.random.default_rng(0)
        self.layers = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "mean_pool":
                self.layers.append({"spec": spec, "weights": None, "bias": None})
                continue
            widths = self.input_split if i == 0 else (spec.in_dim,)
            weights = [Tensor(glorot(rng, spec.in_dim, spec.out_dim, (w, spec.out_dim),
                                     self.dtype), requires_grad=True)
                       for w in widths]
            bias = Tensor(np.zeros((1, spec.out_dim), dtype=self.dtype), requires_grad=True)
            self.layers.append({"spec": spec, "weights": weights, "bias": bias})

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if layer["weights"] is not None:
                out.extend(layer["weights"])
                out.append(layer["bias"])
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def load_snapshot(self, arrays) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ValueError("snapshot does not match the model")
        for p, a in zip(params, arrays):
            p.data = a.copy()

    def _input_tensors(self, inputs, training, rng):
        blocks = list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]
        if len(blocks) != len(self.input_split):
            raise ValueError(f"expected {len(self.input_split)} input blocks, got {len(blocks)}")
        prepared = []
        for block, width in zip(blocks, self.input_split):
            if isinstance(block, SparseMatrix):
                if block.shape[1] != width:
                    raise ValueError(f"input block width {block.shape[1]} != {width}")
                prepared.append(sparse_dropout(block, self.input_dropout, training, rng))
            else:
                t = block if isinstance(block, Tensor) else Tensor(np.asarray(block, dtype=self.dtype))
                if t.shape[1] != width:
                    raise ValueError(f"input block width {t.shape[1]} != {width}")
                prepared.append(dropout(t, self.input_dropout, training, rng))
        return prepared

    def forward(self, adj: SparseMatrix, inputs, *, training: bool = False,
                rng: np.random.Generator | None = None,
                first_adj: SparseMatrix | None = None,
                upto: int | None = None) -> Tensor:
        """Run the stack and return logits (or the layer-upto output)."""
        blocks = self._input_tensors(inputs, training, rng)
        h = None
        stop = len(self.layers) if upto is None else upto
        for i, layer in enumerate(self.layers[:stop]):
            spec = layer["spec"]
            a = first_adj if (i == 0 and first_adj is not None) else adj
            cur = blocks if i == 0 else [h]
            if spec.kind == "mean_pool":
                if len(cur) != 1 or isinstance(cur[0], SparseMatrix):
                    raise ValueError("mean_pool expects a single dense input block")
                h = spmm(a, cur[0])
            else:
                z = None
                for block, w in zip(cur, layer["weights"]):
                    part = spmm(block, w) if isinstance(block, SparseMatrix) else affine(block, w)
                    z = part if z is None else add(z, part)
                z = add_bias(z, layer["bias"])
                h = spmm(a, z) if spec.kind == "gc" else z
            if spec.activation == "relu":
                h = relu(h)
        if h is None:
            raise ValueError("upto=0 leaves nothing to return")
        return h


class QNet(GnnModel):
    """Inference network: node attributes in, class logits out."""


class PNet(GnnModel):
    """Label-dependency network: neighbor label vectors (and optionally
    attributes) in, class logits out."""


def build_qnet(num_features: int, num_classes: int, hidden: int = 16,
               arch: str = "gc2", input_dropout: float = 0.5,
               dtype=DEFAULT_DTYPE, rng: np.random.Generator | None = None) -> QNet:
    specs = make_layer_specs(arch, num_features, hidden, num_classes)
    return QNet(specs, input_dropout=input_dropout, dtype=dtype, rng=rng)


def build_pnet(num_classes: int, hidden: int = 16, arch: str = "gc2",
               num_attr_features: int = 0, input_dropout: float = 0.5,
               dtype=DEFAULT_DTYPE, rng: np.random.Generator | None = None) -> PNet:
    in_dim = num_classes + num_attr_features
    specs = make_layer_specs(arch, in_dim, hidden, num_classes)
    split = (num_classes, num_attr_features) if num_attr_features else None
    if arch == "mean_pool1" and num_attr_features:
        raise ValueError("mean_pool1 does not support attribute blocks")
    return PNet(specs, input_split=split, input_dropout=input_dropout, dtype=dtype, rng=rng)


def q_forward(net: GnnModel, adj: SparseMatrix, features, *, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    return net.forward(adj, [features], training=training, rng=rng)


def p_forward(net: GnnModel, adj: SparseMatrix, label_features, attrs=None, *,
              training: bool = False, rng: np.random.Generator | None = None,
              first_adj: SparseMatrix | None = None) -> Tensor:
    inputs = [label_features] if attrs is None else [label_features, attrs]
    return net.forward(adj, inputs, training=training, rng=rng, first_adj=first_adj)


def row_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.int64)


def accuracy(logits, labels: np.ndarray, idx: np.ndarray) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    preds = predict(logits)
    return float(np.mean(preds[idx] == labels[idx]))


def extract_representations(net: GnnModel, adj: SparseMatrix, inputs) -> np.ndarray:
    """Activations entering the final layer, in evaluation mode."""
    if len(net.layers) < 2:
        raise ValueError("model has no hidden representation to extract")
    h = net.forward(adj, inputs, training=False, upto=len(net.layers) - 1)
    return h.data


# ---------------------------------------------------------------------------
# checkpoints


def save_model(net: GnnModel, path) -> None:
    doc = {
        "class": type(net).__name__,
        "specs": [[s.kind, s.in_dim, s.out_dim, s.activation] for s in net.specs],
        "input_split": list(net.input_split),
        "input_dropout": net.input_dropout,
        "dtype": net.dtype.name,
        "params": [{"shape": list(p.data.shape), "dtype": p.data.dtype.name,
                    "data": base64.b64encode(np.ascontiguousarray(p.data).tobytes()).decode()}
                   for p in net.params()],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_model(path) -> GnnModel:
    with open(path) as fh:
        doc = json.load(fh)
    cls = {"QNet": QNet, "PNet": PNet, "GnnModel": GnnModel}[doc["class"]]
    specs = [LayerSpec(k, i, o, a) for k, i, o, a in doc["specs"]]
    net = cls(specs, input_split=tuple(doc["input_split"]),
              input_dropout=doc["input_dropout"], dtype=np.dtype(doc["dtype"]))
    arrays = []
    for entry in doc["params"]:
        buf = base64.b64decode(entry["data"])
        arrays.append(np.frombuffer(buf, dtype=np.dtype(entry["dtype"]))
                      .reshape(entry["shape"]).copy())
    net.load_snapshot(arrays)
    return net
