"""Tape recording, backward traversal, and finite-difference verification."""

import numpy as np
import pytest

from derain import gradcheck, ops
from derain.autodiff import ShapeError, Tensor, backward, record


def rand64(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), dtype=np.float64)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        with record() as tape:
            loss = ops.sum_all(x)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x], np.ones((3, 4), np.float32))

    def test_relu_subgradient(self):
        x = Tensor(np.array([-1.0, 2.0], np.float32).reshape(1, 1, 2), requires_grad=True)
        with record() as tape:
            loss = ops.sum_all(ops.relu(x))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x].ravel(), [0.0, 1.0])

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with record() as tape:
            y = ops.relu(x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, y)

    def test_fanout_accumulates(self):
        x = Tensor(np.array([[2.0]], np.float32), requires_grad=True)
        with record() as tape:
            y = ops.add(x, x)
            loss = ops.sum_all(y)
        grads = backward(tape, loss)
        assert grads[x][0, 0] == 2.0

    def test_no_tape_no_recording(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        y = ops.relu(x)
        assert y.is_leaf and not y.requires_grad

    def test_reverse_order_single_visit(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with record() as tape:
            y = ops.scale(x, 2.0)
            z = ops.add(y, y)
            loss = ops.sum_all(z)
        assert [n.out for n in tape.nodes] == [y, z, loss]
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x], np.full((2, 2), 4.0, np.float32))

    def test_gradient_shapes_match(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 6, 4, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 1, 3, 3)).astype(np.float32), requires_grad=True)
        with record() as tape:
            loss = ops.mean_all(ops.conv2d(x, w, groups=6, padding=1))
        grads = backward(tape, loss)
        assert grads[x].shape == x.shape and grads[w].shape == w.shape


class TestFiniteDiffCheck:
    def test_linear_map_is_exact(self):
        w = np.random.default_rng(1).standard_normal((4, 4))
        wt = Tensor(w, dtype=np.float64)
        x = rand64(2, 4, seed=2)
        err = gradcheck.finite_diff_check(lambda t: ops.sum_all(ops.matmul(t, wt)), x)
        assert err < 1e-9

    def test_softmax_tight(self):
        x = rand64(3, 5, seed=4)
        probe = rand64(3, 5, seed=5)
        err = gradcheck.finite_diff_check(
            lambda t: ops.sum_all(ops.mul(ops.softmax_rows(t), probe)), x)
        assert err < 1e-6

    def test_corrupted_backward_rule_detected(self, monkeypatch):
        """Negative control: a wrong gradient rule must trip the check."""
        original = ops.relu

        def bad_relu(x):
            from derain.autodiff import active_tape
            y = original(x)
            tape = active_tape()
            if tape is not None and tape.nodes and tape.nodes[-1].out is y:
                true_bwd = tape.nodes[-1].bwd
                tape.nodes[-1].bwd = lambda g: tuple(
                    2.0 * gi if gi is not None else None for gi in true_bwd(g))
            return y

        x = rand64(3, 3, seed=6)
        x.data[np.abs(x.data) < 1e-2] = 0.2
        probe = rand64(3, 3, seed=7)
        err = gradcheck.finite_diff_check(
            lambda t: ops.sum_all(ops.mul(bad_relu(t), probe)), x)
        assert err > 1e-2


class TestOpsSuite:
    def test_all_ops_pass_tolerance(self):
        report = gradcheck.run_scope("ops", seed=0)
        for unit, err in report.items():
            assert err < gradcheck.TOLERANCE, f"{unit}: {err}"

    def test_unknown_scope(self):
        with pytest.raises(ValueError):
            gradcheck.run_scope("everything")
