"""Neural layers and the optimizer: embeddings, LSTM cell/stack, tied output
projection, variational dropout, SGD with global-norm clipping, checkpoints.

Everything here is built on the autodiff Tensor; the LSTM step is a fused op
(one tape record per step) whose elementwise work runs in the kernels module.
"""

import json
import struct

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .autodiff import ShapeError, Tensor

INIT_SCALE = 0.1

# Gate order inside every 4h-wide LSTM weight/bias: input, forget,
# cell-candidate, output. Fixed so checkpoints are interchangeable.
GATE_ORDER = ("input", "forget", "cell", "output")


def uniform_init(rng, shape, scale=INIT_SCALE):
    return rng.uniform(-scale, scale, size=shape)


class Embedding:
    """Lookup table of d-dimensional rows, one per vocabulary id."""

    def __init__(self, vocab_size, dim, rng):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.table = Tensor(uniform_init(rng, (vocab_size, dim)), requires_grad=True)

    def lookup(self, ids) -> Tensor:
        return ad.lookup_rows(self.table, ids)


class LstmCell:
    """Single LSTM layer: W_ih[4h x in], W_hh[4h x h], b[4h], gate order fixed."""

    def __init__(self, input_dim, hidden_dim, rng):
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.w_ih = Tensor(uniform_init(rng, (4 * hidden_dim, input_dim)), requires_grad=True)
        self.w_hh = Tensor(uniform_init(rng, (4 * hidden_dim, hidden_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(4 * hidden_dim), requires_grad=True)

    def step(self, x, h_prev, c_prev):
        return lstm_step(self, x, h_prev, c_prev)


def lstm_step(cell, x, h_prev, c_prev):
    """One LSTM time step for a whole batch; returns (h, c) Tensors.

    Fused: the two matmuls run through BLAS here, the gate nonlinearities and
    their backward run in the kernels module, and the whole step is a single
    tape record with two outputs.
    """
    n = x.data.shape[0]
    h = cell.hidden_dim
    if x.data.ndim != 2 or x.data.shape[1] != cell.input_dim:
        raise ShapeError(
            f"lstm_step: input {x.data.shape} does not match cell input dim {cell.input_dim}"
        )
    if h_prev.data.shape != (n, h) or c_prev.data.shape != (n, h):
        raise ShapeError(
            f"lstm_step: state shapes {h_prev.data.shape}/{c_prev.data.shape} "
            f"do not match (batch={n}, hidden={h})"
        )
    pre = x.data @ cell.w_ih.data.T + h_prev.data @ cell.w_hh.data.T + cell.b.data
    gi, gf, gc, go, c, tc, hidden = K.lstm_gates_forward(pre, c_prev.data)
    h_t = Tensor(hidden)
    c_t = Tensor(c)

    def backward():
        dpre, dc_prev = K.lstm_gates_backward(
            h_t.grad, c_t.grad, gi, gf, gc, go, c_prev.data, tc
        )
        if x.requires_grad:
            x.grad += dpre @ cell.w_ih.data
        if h_prev.requires_grad:
            h_prev.grad += dpre @ cell.w_hh.data
        if c_prev.requires_grad:
            c_prev.grad += dc_prev
        if cell.w_ih.requires_grad:
            cell.w_ih.grad += dpre.T @ x.data
        if cell.w_hh.requires_grad:
            cell.w_hh.grad += dpre.T @ h_prev.data
        if cell.b.requires_grad:
            cell.b.grad += dpre.sum(axis=0)

    ad.register(
        (h_t, c_t), backward, x, h_prev, c_prev, cell.w_ih, cell.w_hh, cell.b
    )
    return h_t, c_t


class LstmStack:
    """Stacked LSTM layers with variational dropout on each layer's output.

    The dropped output feeds the next layer and whatever head consumes the
    top; the raw (undropped) h, c feed the recurrence at the next time step.
    Masks are sampled once per unrolled window and reused at every step.
    """

    def __init__(self, input_dim, hidden_dim, num_layers, dropout_rate, rng):
        self.hidden_dim = int(hidden_dim)
        self.dropout_rate = float(dropout_rate)
        self.layers = []
        for i in range(num_layers):
            in_dim = input_dim if i == 0 else hidden_dim
            self.layers.append(LstmCell(in_dim, hidden_dim, rng))

    def init_state(self, batch_size):
        """Zero carried state: one (h, c) ndarray pair per layer."""
        return [
            (np.zeros((batch_size, self.hidden_dim)), np.zeros((batch_size, self.hidden_dim)))
            for _ in self.layers
        ]

    def sample_masks(self, rng, batch_size):
        """Fresh per-window output masks, one per layer, at the stack's rate."""
        masks = []
        for _ in self.layers:
            m = DropoutMask(self.dropout_rate, (batch_size, self.hidden_dim))
            m.resample(rng)
            masks.append(m)
        return masks

    def step(self, x, states, masks=None):
        """Advance every layer one time step.

        states is a list of (h, c) Tensor pairs; returns (top output, new
        states). With masks given, each layer's downstream output is masked
        while the recurrence keeps the raw tensors.
        """
        new_states = []
        out = x
        for i, cell in enumerate(self.layers):
            h_prev, c_prev = states[i]
            h, c = cell.step(out, h_prev, c_prev)
            new_states.append((h, c))
            out = masks[i].apply(h) if masks is not None else h
        return out, new_states

    def parameters(self):
        out = []
        for i, cell in enumerate(self.layers):
            out += [(f"l{i}.w_ih", cell.w_ih), (f"l{i}.w_hh", cell.w_hh), (f"l{i}.b", cell.b)]
        return out


class TiedProjection:
    """Softmax input projection whose weight is an embedding table.

    Tied mode stores a reference (same Tensor object), so optimizer updates
    to the embedding are immediately visible here. Untied mode owns a copy.
    """

    def __init__(self, table: Tensor, rng=None, tied=True):
        self.tied = bool(tied)
        if tied:
            self.weight = table
        else:
            self.weight = Tensor(uniform_init(rng, table.data.shape), requires_grad=True)
        self.bias = Tensor(np.zeros(table.data.shape[0]), requires_grad=True)

    def logits(self, h: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul_nt(h, self.weight), self.bias)


class DropoutMask:
    """Inverted-dropout mask held fixed across the time steps of one window.

    resample() draws a fresh Bernoulli(1-rate)/(1-rate) mask; apply() is the
    identity in eval mode or at rate 0. Variational use: resample once per
    window, apply at every step.
    """

    def __init__(self, rate, shape):
        rate = float(rate)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.shape = tuple(shape)
        self.mask = None
        self.mode = "train"

    def resample(self, rng):
        if self.rate == 0.0:
            self.mask = None
        else:
            keep = 1.0 - self.rate
            bern = (rng.random(self.shape) < keep).astype(np.float64)
            self.mask = Tensor(bern / keep)

    def apply(self, t: Tensor) -> Tensor:
        if self.mode == "eval" or self.mask is None:
            return t
        return ad.mul(t, self.mask)


def _unique_tensors(params):
    seen = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def global_grad_norm(params) -> float:
    """L2 norm of all gradients jointly (tied tensors counted once)."""
    total = 0.0
    for p in _unique_tensors(params):
        g = p.grad
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_global_norm(params, clip_max) -> float:
    """Scale every gradient so the joint L2 norm is at most clip_max.

    Returns the factor applied (1.0 when already within the ceiling).
    """
    if clip_max <= 0:
        raise ValueError(f"clip_max must be positive, got {clip_max}")
    unique = _unique_tensors(params)
    norm = global_grad_norm(unique)
    if norm <= clip_max or norm == 0.0:
        return 1.0
    factor = clip_max / norm
    for p in unique:
        p.grad *= factor
    return factor


def sgd_apply(params, lr):
    """p <- p - lr * grad for every parameter, then zero the gradients."""
    for p in _unique_tensors(params):
        p.data -= lr * p.grad
        p.zero_grad()


class SgdOptimizer:
    """SGD with joint global-norm clipping across all parameters."""

    def __init__(self, lr, clip_max):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.clip_max = float(clip_max)

    def step(self, params, measure_post_norm=False):
        """Clip, apply, zero. Returns (pre-clip norm, post-clip norm or None)."""
        unique = _unique_tensors(params)
        pre = global_grad_norm(unique)
        clip_global_norm(unique, self.clip_max)
        post = global_grad_norm(unique) if measure_post_norm else None
        sgd_apply(unique, self.lr)
        return pre, post


# --------------------------------------------------------------------------
# Checkpoint container: an 8-byte little-endian length, a JSON manifest
# (parameter names, shapes, byte offsets into the blob, plus caller extras),
# then the concatenated row-major little-endian float64 blob. Tied tensors
# are stored once; every alias name points at the same offset.

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params, extra=None):
    """Write (name, Tensor-or-ndarray) pairs plus an extra manifest dict."""
    entries = []
    chunks = []
    offsets_by_storage = {}
    offset = 0
    for name, p in named_params:
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        key = id(arr)
        if key not in offsets_by_storage:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            offsets_by_storage[key] = offset
            chunks.append(raw)
            offset += len(raw)
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offsets_by_storage[key]}
        )
    manifest = dict(extra or {})
    manifest["checkpoint_version"] = CHECKPOINT_VERSION
    manifest["params"] = entries
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def load_checkpoint(path):
    """Read a checkpoint; returns (manifest, {name: ndarray}).

    Names that were saved at the same offset come back referencing the same
    ndarray object, so ties survive the round trip.
    """
    with open(path, "rb") as f:
        (header_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(header_len).decode("utf-8"))
        blob = f.read()
    arrays = {}
    by_offset = {}
    for entry in manifest["params"]:
        off = entry["offset"]
        if off not in by_offset:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                blob, dtype="<f8", count=count, offset=off
            ).astype(np.float64).reshape(shape)
            by_offset[off] = arr
        arrays[entry["name"]] = by_offset[off]
    return manifest, arrays
