"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are define-by-run: executing an op computes its value immediately and,
when a Tape is active, appends a backward closure to that tape. Execution
order is a topological order of the graph, so replaying the tape in reverse
is a valid backward schedule; no explicit graph structure is kept.

All values are float64 throughout. The only implicit broadcast anywhere is
``add_bias`` (a bias row added to every row of a matrix); every other op
demands exact shape agreement and raises ShapeError naming both shapes.
"""

import numpy as np

from . import kernels as K


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: nested tapes, repeated backward, or a non-scalar root."""


class Tensor:
    """A float64 array plus its gradient accumulator.

    ``grad`` always exists (zeros from birth) and is accumulated into, never
    replaced, so shared parameters collect contributions from every use site.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE = None


class Tape:
    """Linear record of executed ops; replay in reverse to backpropagate.

    Use as a context manager around the forward pass, then call
    ``tape.backward(loss)``. A tape is single-shot: backward may run once.
    """

    def __init__(self):
        self._records = []
        self._spent = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, fn):
        self._records.append(fn)

    def __len__(self):
        return len(self._records)

    def backward(self, root):
        """Seed d(root)/d(root)=1 and run every recorded closure in reverse."""
        if self._spent:
            raise TapeError("backward already ran on this tape")
        if root.data.ndim != 0:
            raise TapeError(
                f"backward root must be a scalar, got shape {root.data.shape}"
            )
        self._spent = True
        root.grad[...] = root.grad + 1.0
        for fn in reversed(self._records):
            fn()


def recording():
    """True when a tape is active (i.e. ops will record backward closures)."""
    return _ACTIVE_TAPE is not None


def register(outputs, backward_fn, *inputs):
    """Registration hook for fused ops defined outside this module.

    Marks every output differentiable and records one backward closure,
    provided a tape is active and some input requires gradients. The closure
    must route each output's .grad to the inputs itself.
    """
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        for out in outputs:
            out.requires_grad = True
        _ACTIVE_TAPE.record(backward_fn)


def _emit(out, backward_fn, *inputs):
    """Mark `out` differentiable and record `backward_fn` if a tape is live."""
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.record(backward_fn)
    return out


# --------------------------------------------------------------------------
# Ops. Each computes eagerly and registers a closure that routes the output
# gradient to whichever inputs require it.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _emit(out, backward, a, b)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose (logit projections)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(
            f"matmul_nt: incompatible shapes {a.data.shape} @ {b.data.shape}.T"
        )
    out = Tensor(a.data @ b.data.T)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.grad += g @ b.data
        if b.requires_grad:
            b.grad += g.T @ a.data

    return _emit(out, backward, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _emit(out, backward, a, b)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a bias row to every row of a matrix (the one sanctioned broadcast)."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(
            f"add_bias: matrix {a.data.shape} incompatible with bias {bias.data.shape}"
        )
    out = Tensor(a.data + bias.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.grad += g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)

    return _emit(out, backward, a, bias)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _emit(out, backward, a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * s

    return _emit(out, backward, a)


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(K.sigmoid_stable(a.data))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * out.data * (1.0 - out.data)

    return _emit(out, backward, a)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (1.0 - out.data * out.data)

    return _emit(out, backward, a)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"concat: expects matrices, got {a.data.shape} and {b.data.shape}"
        )
    off = 1 - axis
    if a.data.shape[off] != b.data.shape[off]:
        raise ShapeError(
            f"concat axis={axis}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def backward():
        g = out.grad
        na = a.data.shape[axis]
        if axis == 0:
            if a.requires_grad:
                a.grad += g[:na]
            if b.requires_grad:
                b.grad += g[na:]
        else:
            if a.requires_grad:
                a.grad += g[:, :na]
            if b.requires_grad:
                b.grad += g[:, na:]

    return _emit(out, backward, a, b)


def concat_rows(tensors) -> Tensor:
    """Stack matrices along axis 0 (n-ary; batches per-step rows for one matmul)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows: empty input")
    width = tensors[0].data.shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != width:
            raise ShapeError(
                f"concat_rows: widths differ, {tensors[0].data.shape} vs {t.data.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))

    def backward():
        g = out.grad
        row = 0
        for t in tensors:
            n = t.data.shape[0]
            if t.requires_grad:
                t.grad += g[row : row + n]
            row += n

    return _emit(out, backward, *tensors)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward():
        if a.requires_grad:
            a.grad += out.grad

    return _emit(out, backward, a)


def lookup_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"lookup_rows: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"lookup_rows: id out of range for table with {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def backward():
        if table.requires_grad:
            K.scatter_add_rows(table.grad, ids, out.grad)

    return _emit(out, backward, table)


def cross_entropy_rows(logits: Tensor, targets):
    """Per-row softmax cross-entropy against integer targets.

    Returns ``(losses, probs)``: a (n,) Tensor of per-row losses and the (n, V)
    softmax ndarray the forward pass computed anyway, so callers that want
    predictive distributions get them for free.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows: logits must be 2-D, got {logits.data.shape}")
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy_rows: logits {logits.data.shape} vs targets {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise IndexError(
            f"cross_entropy_rows: target out of range for {logits.data.shape[1]} classes"
        )
    losses, probs = K.softmax_xent_forward(logits.data, targets)
    out = Tensor(losses)

    def backward():
        if logits.requires_grad:
            logits.grad += K.softmax_xent_backward(probs, targets, out.grad)

    _emit(out, backward, logits)
    return out, probs


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Scalar cross-entropy for a single logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(
            f"softmax_cross_entropy: logits must be 1-D, got {logits.data.shape}"
        )
    v = logits.data.shape[0]
    if not 0 <= int(target) < v:
        raise IndexError(f"softmax_cross_entropy: target {target} out of range for {v} classes")
    tgt = np.asarray([int(target)], dtype=np.int64)
    losses, probs = K.softmax_xent_forward(logits.data.reshape(1, v), tgt)
    out = Tensor(losses[0])

    def backward():
        if logits.requires_grad:
            g = np.asarray([out.grad], dtype=np.float64).reshape(1)
            logits.grad += K.softmax_xent_backward(probs, tgt, g)[0]

    return _emit(out, backward, logits)


def block_gradient(a: Tensor) -> Tensor:
    """A view of `a` that gradients cannot cross (shares data, never records)."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = np.zeros_like(a.data)
    out.requires_grad = False
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Plain softmax over the last axis of an ndarray (not a taped op)."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)
