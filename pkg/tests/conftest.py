"""Shared oracles: central finite differences and gradient comparison."""

import numpy as np
import pytest

from cslm.autodiff import Tape


def finite_difference(f, arr, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. every entry of arr.

    f must recompute its value from arr's current contents on each call
    (define-by-run makes that the natural shape of a forward closure).
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-5):
    """Worst-case relative error with a floor against 0/0 blowup."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def assert_grad_matches(loss_fn, params, tol=1e-4, h=1e-5):
    """Backprop loss_fn once, then finite-difference every named parameter.

    loss_fn() must rebuild the graph from the parameters' current data and
    return the scalar loss Tensor. params is a list of (name, Tensor).
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params}
    for _, t in params:
        t.zero_grad()
    for name, t in params:
        numeric = finite_difference(lambda: loss_fn().item(), t.data, h=h)
        err = max_rel_err(analytic[name], numeric)
        assert err < tol, f"gradient mismatch on {name}: max rel err {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
