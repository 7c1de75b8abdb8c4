"""Reverse-mode automatic differentiation over 2-D numpy arrays.

Everything trainable lives in a Tensor. Ops run their forward pass eagerly
and, while a Tape is active, record a closure that maps the gradient of the
output back onto the inputs. backward() replays the tape in reverse and
leaves gradients in Tensor.grad. Sparse matrices (CSR) participate on the
non-differentiable side of spmm only.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

# upper bound on the elements gathered per spmm block (~256 MiB of float64)
_GATHER_CAP = 1 << 25

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A 2-D float array with an optional gradient slot.

    Scalars are represented as shape (1, 1). requires_grad marks leaf
    parameters; intermediate results are tracked automatically while a
    Tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad", "_track")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._track = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops, used as a context manager.

    Tapes nest; ops record onto the innermost active tape. The tape holds
    references to forward buffers until it is dropped.
    """

    def __init__(self):
        self._ops = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("Tape context exited out of order")
        stack.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def _record(self, out: Tensor, inputs, back) -> None:
        self._ops.append((out, inputs, back))


def _maybe_record(out: Tensor, inputs, back) -> Tensor:
    """Attach an op to the active tape when any input is on a grad path."""
    tape = _active_tape()
    if tape is not None and any(t._track for t in inputs):
        out._track = True
        tape._record(out, inputs, back)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor recorded on the tape.

    loss must be a scalar produced under the tape. A tensor consumed twice
    accumulates both contributions; requires_grad tensors on the tape but
    off the path to loss get zeros.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, back in reversed(tape._ops):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, back(g)):
            if gi is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    for out, inputs, _ in tape._ops:
        for t in inputs + (out,):
            if t.requires_grad:
                g = grads.get(id(t))
                t.grad = np.zeros_like(t.data) if g is None else g


class SparseMatrix:
    """Immutable CSR matrix.

    Used for normalized adjacency and sparse feature matrices. Column
    indices are strictly increasing within each row; values are float.
    """

    __slots__ = ("shape", "indptr", "indices", "values", "_t")

    def __init__(self, indptr, indices, values, shape, validate: bool = True):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values)
        if values.dtype.kind != "f":
            values = values.astype(DEFAULT_DTYPE)
        self.values = values
        self.shape = (int(shape[0]), int(shape[1]))
        self._t = None
        if validate:
            self._validate()

    def _validate(self):
        n_rows, n_cols = self.shape
        if self.indptr.shape != (n_rows + 1,):
            raise ValueError("indptr length must be n_rows + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise ValueError("indptr must start at 0 and end at nnz")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if self.values.shape != self.indices.shape:
            raise ValueError("values and indices must align")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= n_cols:
                raise ValueError("column index out of range")
            # strictly increasing inside each row
            inner = np.diff(self.indices)
            row_start = np.zeros(self.indices.size, dtype=bool)
            row_start[self.indptr[1:-1]] = True
            if np.any(inner[~row_start[1:]] <= 0):
                raise ValueError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        """Build from coordinate triples; duplicate coordinates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values)
        if values.dtype.kind != "f":
            values = values.astype(DEFAULT_DTYPE)
        if not (rows.shape == cols.shape == values.shape):
            raise ValueError("rows, cols and values must have equal length")
        n_rows, n_cols = int(shape[0]), int(shape[1])
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= n_cols:
                raise ValueError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size:
            fresh = np.empty(rows.size, dtype=bool)
            fresh[0] = True
            fresh[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(fresh)
            values = np.add.reduceat(values, starts)
            rows, cols = rows[starts], cols[starts]
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(indptr, cols, values, (n_rows, n_cols), validate=False)

    @classmethod
    def identity(cls, n: int, dtype=DEFAULT_DTYPE) -> "SparseMatrix":
        return cls(np.arange(n + 1), np.arange(n), np.ones(n, dtype=dtype), (n, n), validate=False)

    def matmul(self, x: np.ndarray) -> np.ndarray:
        """CSR @ dense. Gathers rows of x per stored entry, then segment-sums."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] != self.shape[1]:
            raise ValueError(f"shape mismatch: {self.shape} @ {x.shape}")
        out_dtype = np.result_type(self.values.dtype, x.dtype)
        out = np.zeros((self.shape[0], x.shape[1]), dtype=out_dtype)
        if self.nnz == 0:
            return out
        # cap the gathered buffer, looping over row blocks
        block_nnz = max(1, _GATHER_CAP // max(1, x.shape[1]))
        n_rows = self.shape[0]
        row = 0
        while row < n_rows:
            end = int(np.searchsorted(self.indptr, self.indptr[row] + block_nnz, side="left"))
            end = min(max(end, row + 1), n_rows)
            lo, hi = int(self.indptr[row]), int(self.indptr[end])
            if hi > lo:
                contrib = self.values[lo:hi, None] * x[self.indices[lo:hi]]
                local = self.indptr[row:end + 1] - lo
                nonempty = np.flatnonzero(np.diff(local) > 0)
                out[row + nonempty] = np.add.reduceat(contrib, local[:-1][nonempty], axis=0)
            row = end
        return out

    def transpose(self) -> "SparseMatrix":
        """CSC-style transpose; cached, and the cache is shared both ways."""
        if self._t is None:
            n_rows, n_cols = self.shape
            row_of = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(self.indptr))
            order = np.argsort(self.indices, kind="stable")
            indptr = np.zeros(n_cols + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.indices, minlength=n_cols), out=indptr[1:])
            t = SparseMatrix(indptr, row_of[order], self.values[order],
                             (n_cols, n_rows), validate=False)
            t._t = self
            self._t = t
        return self._t

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        row_of = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[row_of, self.indices] = self.values
        return out

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.shape[0], dtype=self.values.dtype)
        nonempty = np.flatnonzero(np.diff(self.indptr) > 0)
        if nonempty.size:
            out[nonempty] = np.add.reduceat(self.values, self.indptr[:-1][nonempty])
        return out

    def scale_values(self, factor) -> "SparseMatrix":
        return SparseMatrix(self.indptr, self.indices, self.values * factor,
                            self.shape, validate=False)

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz}, dtype={self.values.dtype.name})"


# ---------------------------------------------------------------------------
# ops


def spmm(a: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse @ dense product; differentiable with respect to x only."""
    out = Tensor(a.matmul(x.data))

    def back(g):
        gx = a.transpose().matmul(g) if x._track else None
        return (gx,)

    return _maybe_record(out, (x,), back)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b. b has shape (1, out) and broadcasts over rows."""
    z = x.data @ w.data
    if b is not None:
        if b.shape != (1, w.shape[1]):
            raise ValueError(f"bias shape {b.shape} must be (1, {w.shape[1]})")
        z = z + b.data
    out = Tensor(z)
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = g @ w.data.T if x._track else None
        gw = x.data.T @ g if w._track else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=0, keepdims=True) if b._track else None
        return (gx, gw, gb)

    return _maybe_record(out, inputs, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def back(g):
        return (g if a._track else None, g if b._track else None)

    return _maybe_record(out, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b of shape (1, cols), broadcast over rows."""
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"bias shape {b.shape} must be (1, {x.shape[1]})")
    out = Tensor(x.data + b.data)

    def back(g):
        gx = g if x._track else None
        gb = g.sum(axis=0, keepdims=True) if b._track else None
        return (gx, gb)

    return _maybe_record(out, (x, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def back(g):
        return (g * c if x._track else None,)

    return _maybe_record(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def back(g):
        return (g * (x.data > 0) if x._track else None,)

    return _maybe_record(out, (x,), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) at train time.

    Evaluation mode and p == 0 return the input unchanged and consume no
    randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - p))
    out = Tensor(x.data * keep)

    def back(g):
        return (g * keep if x._track else None,)

    return _maybe_record(out, (x,), back)


def sparse_dropout(a: SparseMatrix, p: float, training: bool,
                   rng: np.random.Generator | None = None) -> SparseMatrix:
    """Inverted dropout over the stored values of a sparse matrix.

    The sparsity pattern is kept (dropped entries become stored zeros), so
    downstream spmm stays shape-stable. Not differentiable; meant for
    constant input features.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.values.shape) >= p).astype(a.values.dtype)
    keep *= a.values.dtype.type(1.0 / (1.0 - p))
    return a.scale_values(keep)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a (1, 1) tensor."""
    out = Tensor(np.array([[x.data.sum()]], dtype=x.dtype))

    def back(g):
        if not x._track:
            return (None,)
        return (np.full(x.shape, g[0, 0], dtype=g.dtype),)

    return _maybe_record(out, (x,), back)


def _log_row_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def masked_cross_entropy(logits: Tensor, target, mask) -> Tensor:
    """Mean cross-entropy between softmax(logits) and target rows over mask.

    mask is a 1-D array of row indices and must be non-empty. target is a
    dense array (full height, row-stochastic on the masked rows, tolerance
    1e-6) or a SparseMatrix with the same convention; no gradient flows to
    the target.
    """
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("masked_cross_entropy: empty mask")
    n, k = logits.shape
    if mask.min() < 0 or mask.max() >= n:
        raise ValueError("mask index out of range")
    full = mask.size == n and np.array_equal(mask, np.arange(n))
    z = logits.data if full else logits.data[mask]
    logp = _log_row_softmax(z)
    inv_m = 1.0 / mask.size

    if isinstance(target, SparseMatrix):
        if target.shape != (n, k):
            raise ValueError(f"target shape {target.shape} must match logits {logits.shape}")
        sums = target.row_sums()[mask]
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("target rows on the mask must sum to 1")
        loc = np.full(n, -1, dtype=np.int64)
        loc[mask] = np.arange(mask.size)
        row_of = np.repeat(np.arange(n, dtype=np.int64), np.diff(target.indptr))
        sel = loc[row_of] >= 0
        t_rows = loc[row_of[sel]]
        t_cols = target.indices[sel]
        t_vals = target.values[sel]
        loss = -float(np.sum(t_vals * logp[t_rows, t_cols])) * inv_m

        def back(g):
            if not logits._track:
                return (None,)
            glocal = np.exp(logp)
            glocal[t_rows, t_cols] -= t_vals  # CSR coordinates are unique
            glocal *= g[0, 0] * inv_m
            if full:
                return (glocal.astype(logits.dtype, copy=False),)
            gl = np.zeros_like(logits.data)
            gl[mask] = glocal
            return (gl,)

    else:
        tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
        if tdata.shape != (n, k):
            raise ValueError(f"target shape {tdata.shape} must match logits {logits.shape}")
        trows = tdata if full else tdata[mask]
        if np.any(np.abs(trows.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("target rows on the mask must sum to 1")
        loss = -float(np.sum(trows * logp)) * inv_m

        def back(g):
            if not logits._track:
                return (None,)
            glocal = np.exp(logp) - trows
            glocal *= g[0, 0] * inv_m
            if full:
                return (glocal.astype(logits.dtype, copy=False),)
            gl = np.zeros_like(logits.data)
            gl[mask] = glocal
            return (gl,)

    out = Tensor(np.array([[loss]], dtype=logits.dtype))
    return _maybe_record(out, (logits,), back)


# ---------------------------------------------------------------------------
# optimizers


class RMSProp:
    """RMSProp with coupled L2 weight decay (decay added to the gradient)."""

    kind = "rmsprop"

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 rho: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.rho = float(rho)
        self.eps = float(eps)
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, a in zip(self.params, self.acc):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            a *= self.rho
            a += (1.0 - self.rho) * g * g
            p.data -= self.lr * g / (np.sqrt(a) + self.eps)


class Adam:
    """Adam with bias correction and coupled L2 weight decay."""

    kind = "adam"

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 0.0):
    kind = kind.lower()
    if kind == "rmsprop":
        return RMSProp(params, lr, weight_decay)
    if kind == "adam":
        return Adam(params, lr, weight_decay)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
