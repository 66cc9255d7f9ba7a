"""Tensor engine: broadcasting, accumulation, graph lifecycle, grad and checked modes."""
import numpy as np
import pytest

from mcdnet.errors import GraphError, NonFiniteError, ShapeError
from mcdnet.gradcheck import finite_diff_check
from mcdnet.tensor import Tensor, checked_mode, concat, make_op, no_grad


class TestArithmetic:
    def test_broadcast_add_sums_gradient_back(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.full((1, 3), 2.0))

    def test_scalar_broadcast_mul(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_division_and_power(self):
        x = Tensor(np.array([1.0, 2.0, 4.0]), requires_grad=True, dtype=np.float64)
        ((x ** 2) / 2.0).sum().backward()
        np.testing.assert_allclose(x.grad, x.data)

    def test_mean_over_axes(self):
        x = Tensor(np.ones((2, 3, 4, 5)), requires_grad=True)
        x.mean(axis=(2, 3)).sum().backward()
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1.0 / 20.0))

    def test_getitem_scatters_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x[:, 1].sum().backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [0, 1, 0]])

    def test_concat_splits_gradient(self):
        a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (1, 5, 2, 2)
        (out * np.arange(5.0).reshape(1, 5, 1, 1)).sum().backward()
        np.testing.assert_array_equal(a.grad[0, :, 0, 0], [0, 1])
        np.testing.assert_array_equal(b.grad[0, :, 0, 0], [2, 3, 4])

    def test_integer_input_promoted_to_float32(self):
        assert Tensor(np.arange(3)).dtype == np.float32


class TestGraph:
    def test_item_of_single_element(self):
        assert Tensor(np.array([[2.5]])).item() == 2.5
        assert Tensor(np.ones((2, 3))).sum().item() == 6.0

    def test_item_rejects_multi_element_tensors(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)).item()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_backward_without_grad_raises(self):
        with pytest.raises(GraphError):
            Tensor(np.ones(1)).sum().backward()

    def test_second_backward_on_consumed_graph_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_retain_graph_allows_second_pass(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).sum()
        y.backward(retain_graph=True)
        y.backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 4.0))

    def test_non_leaf_grad_only_when_retained(self):
        x = Tensor(np.ones(2), requires_grad=True)
        h = x * 3.0
        k = (x * 2.0).retain_grad()
        (h + k).sum().backward()
        assert h.grad is None
        np.testing.assert_array_equal(k.grad, np.ones(2))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert y.is_leaf


class TestCheckedMode:
    def test_non_finite_raises_when_checked(self):
        x = Tensor(np.array([0.0, 1.0]))
        with checked_mode(True):
            with pytest.raises(NonFiniteError):
                x.log()

    def test_non_finite_passes_when_unchecked(self):
        with np.errstate(divide="ignore"):
            out = Tensor(np.array([0.0, 1.0])).log()
        assert np.isneginf(out.data[0])

    def test_checked_mode_restores_previous_state(self):
        with checked_mode(True):
            pass
        with np.errstate(divide="ignore"):
            Tensor(np.array([0.0])).log()


class TestGradcheckNegativeControl:
    def test_corrupted_backward_is_detected(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)

        def bad_square(t):
            # true derivative is 2x; report x instead
            return make_op(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")

        err = finite_diff_check(lambda t: bad_square(t).sum(), [x])
        assert err > 0.1

    def test_correct_backward_passes(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        err = finite_diff_check(lambda t: (t * t).sum(), [x])
        assert err < 1e-6
