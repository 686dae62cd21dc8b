"""Autodiff core: every op against finite differences, tape discipline,
accumulation under reuse, and the shape/index error contracts."""

import numpy as np
import pytest

from cslm import autodiff as ad
from cslm.autodiff import ShapeError, Tape, TapeError, Tensor
from tests.conftest import finite_difference, max_rel_err


def check_op(build, arrays, tol=1e-4, seeds_grad=None):
    """FD-check d(sum of op output)/d(input) for every input array.

    build(tensors) -> output Tensor; arrays are the raw inputs (mutated in
    place by the FD probe). seeds_grad optionally weights the output sum.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    # the closure reloads data so FD perturbations are visible
    for t, a in zip(tensors, arrays):
        t.data = a

    def forward():
        out = build(tensors)
        if seeds_grad is None:
            return ad.sum_all(out)
        return ad.sum_all(ad.mul(out, Tensor(seeds_grad)))

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        numeric = finite_difference(lambda: forward().item(), a)
        err = max_rel_err(t.grad, numeric)
        assert err < tol, f"input {i}: max rel err {err:.3e}"


class TestOpGradients:
    def test_matmul(self, rng):
        check_op(lambda t: ad.matmul(t[0], t[1]),
                 [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 5))])

    def test_matmul_nt(self, rng):
        check_op(lambda t: ad.matmul_nt(t[0], t[1]),
                 [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (5, 4))])

    def test_add(self, rng):
        check_op(lambda t: ad.add(t[0], t[1]),
                 [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))])

    def test_add_bias(self, rng):
        check_op(lambda t: ad.add_bias(t[0], t[1]),
                 [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, 4)])

    def test_mul(self, rng):
        check_op(lambda t: ad.mul(t[0], t[1]),
                 [rng.uniform(-2, 2, (2, 5)), rng.uniform(-2, 2, (2, 5))])

    def test_scale(self, rng):
        check_op(lambda t: ad.scale(t[0], -1.7), [rng.uniform(-2, 2, (3, 3))])

    def test_sigmoid(self, rng):
        check_op(lambda t: ad.sigmoid(t[0]), [rng.uniform(-2, 2, (4, 3))], tol=1e-6)

    def test_tanh(self, rng):
        check_op(lambda t: ad.tanh(t[0]), [rng.uniform(-2, 2, (4, 3))], tol=1e-6)

    @pytest.mark.parametrize("axis", [0, 1])
    def test_concat(self, rng, axis):
        shape_b = (2, 4) if axis == 0 else (3, 2)
        check_op(lambda t: ad.concat(t[0], t[1], axis=axis),
                 [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, shape_b)])

    def test_concat_rows(self, rng):
        check_op(lambda t: ad.concat_rows(t),
                 [rng.uniform(-2, 2, (n, 3)) for n in (1, 2, 4)])

    def test_lookup_rows_with_repeats(self, rng):
        ids = np.array([0, 3, 3, 1, 0], dtype=np.int64)
        check_op(lambda t: ad.lookup_rows(t[0], ids),
                 [rng.uniform(-2, 2, (5, 3))])

    def test_cross_entropy_rows(self, rng):
        targets = np.array([1, 0, 4, 2], dtype=np.int64)
        weights = rng.uniform(0.5, 1.5, 4)
        check_op(lambda t: ad.cross_entropy_rows(t[0], targets)[0],
                 [rng.uniform(-2, 2, (4, 5))], seeds_grad=weights)

    def test_softmax_cross_entropy_scalar(self, rng):
        logits = rng.uniform(-2, 2, 6)
        t = Tensor(logits, requires_grad=True)

        def forward():
            return ad.softmax_cross_entropy(t, 2)

        with Tape() as tape:
            loss = forward()
        tape.backward(loss)
        numeric = finite_difference(lambda: forward().item(), t.data)
        assert max_rel_err(t.grad, numeric) < 1e-6


class TestValueContracts:
    def test_sigmoid_and_tanh_at_zero(self):
        assert ad.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5
        assert ad.tanh(Tensor(np.zeros(3))).data[0] == 0.0

    def test_softmax_cross_entropy_values(self):
        assert ad.softmax_cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(
            np.log(2.0), rel=1e-12
        )
        assert ad.softmax_cross_entropy(Tensor([1000.0, 0.0]), 0).item() == pytest.approx(
            0.0, abs=1e-12
        )
        v = 11
        assert ad.softmax_cross_entropy(Tensor(np.full(v, 3.3)), 7).item() == pytest.approx(
            np.log(v), rel=1e-12
        )

    def test_softmax_rows_normalize_and_stay_open_interval(self, rng):
        x = rng.uniform(-30, 30, (8, 12))
        p = ad.softmax(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert (p > 0).all() and (p < 1).all()

    def test_softmax_argmax_invariant_under_constant_shift(self, rng):
        x = rng.uniform(-2, 2, (5, 9))
        assert (
            ad.softmax(x).argmax(axis=1) == ad.softmax(x + 13.5).argmax(axis=1)
        ).all()

    def test_index_errors(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(Tensor([0.0, 0.0]), 2)
        with pytest.raises(IndexError):
            ad.cross_entropy_rows(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(IndexError):
            ad.lookup_rows(Tensor(np.zeros((2, 3))), np.array([2]))


class TestTapeDiscipline:
    def test_scale_then_sum_example(self):
        w = Tensor([1.0, 1.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.scale(w, 3.0))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [3.0, 3.0])

    def test_reuse_accumulates_both_paths(self):
        w = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.add(w, w))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.full(4, 2.0))

    def test_k_fold_reuse_accumulates_k_paths(self, rng):
        w = Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True)
        k = 5
        with Tape() as tape:
            acc = w
            for _ in range(k - 1):
                acc = ad.add(acc, w)
            loss = ad.sum_all(acc)
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, np.full((2, 2), float(k)), rtol=1e-15)

    def test_non_scalar_root_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ad.scale(w, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(out)

    def test_second_backward_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(w)
        tape.backward(loss)
        with pytest.raises(TapeError, match="already"):
            tape.backward(loss)

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(TapeError, match="nest"):
                with Tape():
                    pass

    def test_no_tape_means_no_recording(self):
        w = Tensor(np.ones(2), requires_grad=True)
        out = ad.scale(w, 2.0)
        assert not out.requires_grad
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_repeated_passes_give_bitwise_equal_grads(self, rng):
        a = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)

        def run():
            with Tape() as tape:
                loss = ad.sum_all(ad.matmul(ad.tanh(a), ad.sigmoid(b)))
            tape.backward(loss)
            ga, gb = a.grad.copy(), b.grad.copy()
            a.zero_grad()
            b.zero_grad()
            return ga, gb

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert (ga1 == ga2).all() and (gb1 == gb2).all()

    def test_block_gradient_shares_data_and_blocks(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            doubled = ad.scale(w, 2.0)
            blocked = ad.block_gradient(doubled)
            loss = ad.sum_all(blocked)
        assert blocked.data is doubled.data
        assert not blocked.requires_grad
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.zeros(3))


class TestShapeErrors:
    @pytest.mark.parametrize(
        "build",
        [
            lambda: ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3)))),
            lambda: ad.matmul_nt(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 4)))),
            lambda: ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2)))),
            lambda: ad.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2))),
            lambda: ad.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))),
            lambda: ad.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), axis=1),
            lambda: ad.concat_rows([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))]),
            lambda: ad.cross_entropy_rows(Tensor(np.zeros((2, 3))), np.array([0, 1, 2])),
        ],
    )
    def test_mismatches_raise_and_name_both_shapes(self, build):
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            build()
