"""Finite-difference verification of every differentiable operator and of the whole network."""
import numpy as np
import pytest

from mcdnet import functional as F
from mcdnet.config import ModelConfig
from mcdnet.gradcheck import finite_diff_check, relative_error
from mcdnet.model import build_model
from mcdnet.tensor import Tensor, concat, no_grad

TOL = 1e-5


def leaf(rng, *shape, shift=0.0):
    return Tensor(rng.standard_normal(shape) + shift, requires_grad=True, dtype=np.float64)


def projected(fn, rng, *inputs):
    """Scalarize an operator with a fixed random projection so every output coordinate matters."""
    with no_grad():
        r = rng.standard_normal(fn(*inputs).shape)
    return lambda *xs: (fn(*xs) * r).sum()


class TestOperatorGradients:
    @pytest.mark.parametrize("x_shape,w_shape,bias,kwargs", [
        ((2, 4, 7, 7), (4, 2, 3, 3), True, dict(stride=2, padding=2, dilation=2, groups=2)),
        ((1, 3, 5, 5), (3, 1, 3, 3), False, dict(padding=1, groups=3)),
        ((1, 2, 6, 5), (3, 2, 1, 1), True, dict()),
        ((2, 1, 6, 6), (2, 1, 5, 5), True, dict(padding=2)),
    ])
    def test_conv2d(self, rng, x_shape, w_shape, bias, kwargs):
        x, w = leaf(rng, *x_shape), leaf(rng, *w_shape)
        inputs = [x, w, leaf(rng, w_shape[0])] if bias else [x, w]

        def conv(x, w, b=None):
            return F.conv2d(x, w, b, **kwargs)

        assert finite_diff_check(projected(conv, rng, *inputs), inputs, eps=1e-3) < TOL

    @pytest.mark.parametrize("x_shape,out_features", [((3, 5), 4), ((2, 3, 4), 2), ((6, 1), 3)])
    def test_linear(self, rng, x_shape, out_features):
        x, w, b = leaf(rng, *x_shape), leaf(rng, out_features, x_shape[-1]), leaf(rng, out_features)
        assert finite_diff_check(projected(F.linear, rng, x, w, b), [x, w, b], eps=1e-3) < TOL

    @pytest.mark.parametrize("shape", [(3, 2, 3, 3), (2, 3, 2, 4), (5, 1, 2, 2)])
    def test_batch_norm_training(self, rng, shape):
        c = shape[1]
        x, g, b = leaf(rng, *shape), leaf(rng, c, shift=1.0), leaf(rng, c)

        def fn(x, g, b):
            return F.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)

        assert finite_diff_check(projected(fn, rng, x, g, b), [x, g, b]) < 1e-4

    @pytest.mark.parametrize("shape", [(2, 2, 3, 3), (1, 3, 4, 2), (3, 1, 1, 5)])
    def test_batch_norm_eval(self, rng, shape):
        c = shape[1]
        x, g, b = leaf(rng, *shape), leaf(rng, c), leaf(rng, c)
        mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        fn = lambda x, g, b: F.batch_norm(x, g, b, mean, var, training=False)  # noqa: E731
        assert finite_diff_check(projected(fn, rng, x, g, b), [x, g, b]) < TOL

    @pytest.mark.parametrize("align_corners", [False, True])
    @pytest.mark.parametrize("shape,size", [((1, 2, 3, 4), (7, 9)), ((2, 1, 2, 2), (4, 4)), ((1, 1, 3, 1), (6, 5))])
    def test_upsample_bilinear(self, rng, align_corners, shape, size):
        x = leaf(rng, *shape)
        fn = lambda x: F.upsample_bilinear(x, *size, align_corners)  # noqa: E731
        assert finite_diff_check(projected(fn, rng, x), [x], eps=1e-3) < TOL

    @pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 2, 6, 4), (3, 1, 2, 6)])
    @pytest.mark.parametrize("op", [
        F.global_avg_pool,
        F.global_max_pool,
        F.channelwise_avg,
        F.channelwise_max,
        lambda x: F.max_pool2d(x, 2),
        lambda x: F.avg_pool2d(x, 2),
    ])
    def test_pooling(self, rng, op, shape):
        x = leaf(rng, *shape)
        assert finite_diff_check(projected(op, rng, x), [x]) < TOL

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 5), (7,)])
    @pytest.mark.parametrize("op", [F.relu, F.relu6, F.sigmoid, lambda t: t.exp(), lambda t: t ** 3])
    def test_elementwise(self, rng, op, shape):
        x = leaf(rng, *shape)
        # keep perturbations away from the ReLU kinks
        x.data[np.abs(x.data) < 0.05] = 0.5
        x.data[np.abs(x.data - 6.0) < 0.05] = 5.5
        assert finite_diff_check(projected(op, rng, x), [x]) < TOL

    @pytest.mark.parametrize("a_shape,b_shape", [((2, 3), (1, 3)), ((4, 1), (1, 5)), ((2, 3, 4), (4,))])
    def test_broadcast_arithmetic(self, rng, a_shape, b_shape):
        a, b = leaf(rng, *a_shape), leaf(rng, *b_shape, shift=5.0)
        fn = lambda a, b: (a * b - a / b + 2.0) / (b + 1.0)  # noqa: E731
        assert finite_diff_check(projected(fn, rng, a, b), [a, b]) < TOL

    @pytest.mark.parametrize("rows,a_cols,b_cols", [(2, 3, 2), (1, 4, 1), (3, 1, 3)])
    def test_log_reshape_getitem_concat(self, rng, rows, a_cols, b_cols):
        a, b = leaf(rng, rows, a_cols, shift=4.0), leaf(rng, rows, b_cols)
        total = rows * (a_cols + b_cols)

        def fn(a, b):
            joined = concat([a.log(), b], axis=1).reshape(total)
            return joined[1:total - 1]

        assert finite_diff_check(projected(fn, rng, a, b), [a, b]) < TOL

    @pytest.mark.parametrize("shape", [(2, 2, 3, 3), (1, 3, 2, 4), (3, 4, 1, 2)])
    def test_softmax_ce(self, rng, shape):
        n, c, h, w = shape
        logits = leaf(rng, *shape)
        target = rng.integers(0, c, size=(n, h, w))
        weights = tuple(rng.uniform(0.1, 1.0, size=c))
        fn = lambda z: F.softmax_ce(z, target, weights)  # noqa: E731
        assert finite_diff_check(fn, [logits]) < TOL


class TestNetworkGradient:
    @pytest.mark.parametrize("use_cbam", [True, False])
    def test_full_model(self, use_cbam):
        model = build_model(ModelConfig(channel_scale=0.25, use_cbam=use_cbam), seed=1, dtype=np.float64)
        model.eval()
        rng = np.random.default_rng(5)
        images = Tensor(rng.uniform(0.0, 1.0, (2, 3, 16, 16)))
        r = rng.standard_normal((2, 2, 16, 16))

        def fn(*_params):
            return (model(images) * r).sum()

        worst = finite_diff_check(fn, model.parameters(), eps=1e-5, floor=1e-6, max_coords=2, seed=7)
        assert worst <= 1e-3


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0, floor=1e-8) == pytest.approx(1e-4)


def test_sum_has_unit_gradient(rng):
    x = leaf(rng, 3, 4)
    assert finite_diff_check(lambda t: t.sum(), [x], eps=1e-3) <= 1e-10
