"""Hot numeric inner loops, each with a numba-compiled and a pure-numpy twin.

The active backend is picked once at import time: numba when importable,
unless ``CSLM_NUMBA=0`` forces the numpy path. Both twins stay importable
regardless of the selection so they can be compared head to head (see
``benchmarks/bench_kernels.py`` and ``tests/test_kernels.py``).

Matrix products are deliberately *not* here: BLAS already owns those. The
kernels below are the fused elementwise passes that otherwise burn time in
many small numpy calls, plus the scatter-add that ``np.add.at`` makes slow.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("CSLM_NUMBA", "1") != "0"


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return "numba" if USE_NUMBA else "numpy"


def sigmoid_stable(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function (branches on sign instead of exp(-x))."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# Fused LSTM gate nonlinearities.
#
# `pre` holds the 4H pre-activations in gate order (input, forget,
# cell-candidate, output); the matmuls producing `pre` happen outside.


def lstm_gates_forward_np(pre, c_prev):
    n, h = c_prev.shape
    gi = sigmoid_stable(pre[:, :h])
    gf = sigmoid_stable(pre[:, h : 2 * h])
    gc = np.tanh(pre[:, 2 * h : 3 * h])
    go = sigmoid_stable(pre[:, 3 * h :])
    c = gf * c_prev + gi * gc
    tc = np.tanh(c)
    hidden = go * tc
    return gi, gf, gc, go, c, tc, hidden


def _lstm_gates_forward_loops(pre, c_prev):
    n, h = c_prev.shape
    gi = np.empty((n, h))
    gf = np.empty((n, h))
    gc = np.empty((n, h))
    go = np.empty((n, h))
    c = np.empty((n, h))
    tc = np.empty((n, h))
    hidden = np.empty((n, h))
    for r in range(n):
        for k in range(h):
            gi[r, k] = _sig(pre[r, k])
            gf[r, k] = _sig(pre[r, h + k])
            gc[r, k] = math.tanh(pre[r, 2 * h + k])
            go[r, k] = _sig(pre[r, 3 * h + k])
            c[r, k] = gf[r, k] * c_prev[r, k] + gi[r, k] * gc[r, k]
            tc[r, k] = math.tanh(c[r, k])
            hidden[r, k] = go[r, k] * tc[r, k]
    return gi, gf, gc, go, c, tc, hidden


def _sig_py(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def lstm_gates_backward_np(dh, dc_in, gi, gf, gc, go, c_prev, tc):
    """Gradients of the fused gate pass.

    dh/dc_in are the incoming gradients on the hidden and cell outputs.
    Returns (dpre, dc_prev) where dpre matches the (n, 4H) pre-activation
    layout of the forward pass.
    """
    n, h = dh.shape
    dgo = dh * tc
    dc = dc_in + dh * go * (1.0 - tc * tc)
    dpre = np.empty((n, 4 * h))
    dpre[:, :h] = (dc * gc) * gi * (1.0 - gi)
    dpre[:, h : 2 * h] = (dc * c_prev) * gf * (1.0 - gf)
    dpre[:, 2 * h : 3 * h] = (dc * gi) * (1.0 - gc * gc)
    dpre[:, 3 * h :] = dgo * go * (1.0 - go)
    dc_prev = dc * gf
    return dpre, dc_prev


def _lstm_gates_backward_loops(dh, dc_in, gi, gf, gc, go, c_prev, tc):
    n, h = dh.shape
    dpre = np.empty((n, 4 * h))
    dc_prev = np.empty((n, h))
    for r in range(n):
        for k in range(h):
            dgo = dh[r, k] * tc[r, k]
            dc = dc_in[r, k] + dh[r, k] * go[r, k] * (1.0 - tc[r, k] * tc[r, k])
            dpre[r, k] = (dc * gc[r, k]) * gi[r, k] * (1.0 - gi[r, k])
            dpre[r, h + k] = (dc * c_prev[r, k]) * gf[r, k] * (1.0 - gf[r, k])
            dpre[r, 2 * h + k] = (dc * gi[r, k]) * (1.0 - gc[r, k] * gc[r, k])
            dpre[r, 3 * h + k] = dgo * go[r, k] * (1.0 - go[r, k])
            dc_prev[r, k] = dc * gf[r, k]
    return dpre, dc_prev


# --------------------------------------------------------------------------
# Row-wise softmax cross-entropy (max-subtracted for stability).


def softmax_xent_forward_np(logits, targets):
    """Per-row loss log(sum exp) - logit[target], plus the softmax rows."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    losses = np.log(s[:, 0]) + m[:, 0] - logits[rows, targets]
    return losses, probs


def _softmax_xent_forward_loops(logits, targets):
    n, v = logits.shape
    losses = np.empty(n)
    probs = np.empty((n, v))
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(v):
            e = math.exp(logits[r, j] - m)
            probs[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(v):
            probs[r, j] *= inv
        losses[r] = math.log(s) + m - logits[r, targets[r]]
    return losses, probs


def softmax_xent_backward_np(probs, targets, gout):
    """d(losses)/d(logits) contracted with the per-row upstream grads gout."""
    gl = probs * gout[:, None]
    gl[np.arange(probs.shape[0]), targets] -= gout
    return gl


def _softmax_xent_backward_loops(probs, targets, gout):
    n, v = probs.shape
    gl = np.empty((n, v))
    for r in range(n):
        g = gout[r]
        for j in range(v):
            gl[r, j] = probs[r, j] * g
        gl[r, targets[r]] -= g
    return gl


# --------------------------------------------------------------------------
# Embedding-table scatter-add (the gather's backward pass).


def scatter_add_rows_np(table, ids, rows):
    np.add.at(table, ids, rows)


def _scatter_add_rows_loops(table, ids, rows):
    n, d = rows.shape
    for r in range(n):
        t = ids[r]
        for k in range(d):
            table[t, k] += rows[r, k]


if HAS_NUMBA:
    _sig = njit(cache=True, inline="always")(_sig_py)
    lstm_gates_forward_nb = njit(cache=True)(_lstm_gates_forward_loops)
    lstm_gates_backward_nb = njit(cache=True)(_lstm_gates_backward_loops)
    softmax_xent_forward_nb = njit(cache=True)(_softmax_xent_forward_loops)
    softmax_xent_backward_nb = njit(cache=True)(_softmax_xent_backward_loops)
    scatter_add_rows_nb = njit(cache=True)(_scatter_add_rows_loops)

if USE_NUMBA:
    lstm_gates_forward = lstm_gates_forward_nb
    lstm_gates_backward = lstm_gates_backward_nb
    softmax_xent_forward = softmax_xent_forward_nb
    softmax_xent_backward = softmax_xent_backward_nb
    scatter_add_rows = scatter_add_rows_nb
else:
    lstm_gates_forward = lstm_gates_forward_np
    lstm_gates_backward = lstm_gates_backward_np
    softmax_xent_forward = softmax_xent_forward_np
    softmax_xent_backward = softmax_xent_backward_np
    scatter_add_rows = scatter_add_rows_np
