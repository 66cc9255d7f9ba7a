"""Channel and spatial attention against direct per-element evaluation."""
import numpy as np
import pytest
from pydantic import ValidationError

from mcdnet.cbam import build_cbam, cbam_refine, channel_attention, spatial_attention
from mcdnet.config import CbamConfig
from mcdnet.errors import ShapeError
from mcdnet.gradcheck import finite_diff_check
from mcdnet.tensor import Tensor


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def channel_reference(f, cbam):
    f = np.asarray(f, np.float64)
    w1 = cbam.channel_gate.fc1.weight.data.astype(np.float64)
    w2 = cbam.channel_gate.fc2.weight.data.astype(np.float64)
    b2 = cbam.channel_gate.fc2.bias.data.astype(np.float64)
    n, c = f.shape[:2]
    out = np.zeros((n, c, 1, 1))
    for i in range(n):
        avg = np.array([f[i, k].mean() for k in range(c)])
        mx = np.array([f[i, k].max() for k in range(c)])
        mlp = lambda v: w2 @ np.maximum(w1 @ v, 0.0) + b2  # noqa: E731
        out[i, :, 0, 0] = sigmoid(mlp(avg) + mlp(mx))
    return out


def spatial_reference(f, cbam):
    f = np.asarray(f, np.float64)
    w = cbam.spatial_gate.conv.weight.data[0].astype(np.float64)
    b = float(cbam.spatial_gate.conv.bias.data[0])
    k = w.shape[-1]
    pad = k // 2
    n, c, h, wd = f.shape
    pooled = np.stack([f.mean(axis=1), f.max(axis=1)], axis=1)
    padded = np.pad(pooled, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, 1, h, wd))
    for i in range(n):
        for y in range(h):
            for x in range(wd):
                out[i, 0, y, x] = sigmoid(np.sum(w * padded[i, :, y:y + k, x:x + k]) + b)
    return out


def random_cbam(seed, dtype=np.float64):
    """Attention block of random width, reduction and kernel with non-zero biases."""
    rng = np.random.default_rng(seed)
    reduction = int(rng.choice([1, 2, 4]))
    channels = reduction * int(rng.integers(1, 5))
    cfg = CbamConfig(channels=channels, reduction_ratio=reduction, spatial_kernel=int(rng.choice([1, 3, 5, 7])))
    cbam = build_cbam(cfg, rng).to_dtype(dtype)
    cbam.channel_gate.fc2.bias.data = rng.standard_normal(channels).astype(dtype)
    cbam.spatial_gate.conv.bias.data = rng.standard_normal(1).astype(dtype)
    shape = (int(rng.integers(1, 3)), channels, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    return cbam, rng.standard_normal(shape).astype(dtype)


@pytest.fixture
def cbam8():
    return build_cbam(CbamConfig(channels=8, reduction_ratio=2), np.random.default_rng(11)).to_dtype(np.float64)


def zeroed(cbam):
    for p in cbam.parameters():
        p.data[...] = 0.0
    return cbam


class TestConfig:
    def test_hidden_width_must_be_positive(self):
        with pytest.raises(ValidationError):
            CbamConfig(channels=8, reduction_ratio=16)

    def test_kernel_must_be_odd(self):
        with pytest.raises(ValidationError):
            CbamConfig(channels=32, spatial_kernel=6)

    def test_defaults(self):
        cfg = CbamConfig(channels=64)
        assert (cfg.reduction_ratio, cfg.spatial_kernel, cfg.hidden) == (16, 7, 4)


class TestChannelAttention:
    @pytest.mark.parametrize("dtype,rtol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    @pytest.mark.parametrize("case", range(20))
    def test_matches_reference(self, case, dtype, rtol):
        cbam, f = random_cbam(case, dtype)
        out = channel_attention(Tensor(f), cbam).data
        assert out.shape == (f.shape[0], f.shape[1], 1, 1)
        np.testing.assert_allclose(out, channel_reference(f, cbam), rtol=rtol, atol=rtol)

    def test_reference_case(self, cbam8, rng):
        f = rng.standard_normal((2, 8, 5, 5))
        np.testing.assert_allclose(channel_attention(Tensor(f), cbam8).data, channel_reference(f, cbam8), rtol=1e-6)

    def test_zero_parameters_give_half(self, cbam8, rng):
        out = channel_attention(Tensor(rng.standard_normal((1, 8, 3, 3))), zeroed(cbam8)).data
        np.testing.assert_array_equal(out, 0.5)

    def test_constant_per_channel(self, cbam8):
        v = np.linspace(-1.0, 1.0, 8)
        f = np.broadcast_to(v.reshape(1, 8, 1, 1), (1, 8, 4, 4)).copy()
        fc1, fc2 = cbam8.channel_gate.fc1, cbam8.channel_gate.fc2
        mlp = fc2.weight.data @ np.maximum(fc1.weight.data @ v, 0.0) + fc2.bias.data
        np.testing.assert_allclose(channel_attention(Tensor(f), cbam8).data[0, :, 0, 0], sigmoid(2.0 * mlp), rtol=1e-10)

    def test_channel_mismatch(self, cbam8):
        with pytest.raises(ShapeError):
            channel_attention(Tensor(np.zeros((1, 4, 3, 3))), cbam8)


class TestSpatialAttention:
    @pytest.mark.parametrize("dtype,rtol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    @pytest.mark.parametrize("case", range(20))
    def test_matches_reference(self, case, dtype, rtol):
        cbam, f = random_cbam(100 + case, dtype)
        out = spatial_attention(Tensor(f), cbam).data
        assert out.shape == (f.shape[0], 1, *f.shape[2:])
        np.testing.assert_allclose(out, spatial_reference(f, cbam), rtol=rtol, atol=rtol)

    @pytest.mark.parametrize("seed", range(3))
    def test_reference_case(self, cbam8, seed):
        f = np.random.default_rng(seed).standard_normal((1, 4, 9, 9))
        out = spatial_attention(Tensor(f), cbam8).data
        assert out.shape == (1, 1, 9, 9)
        np.testing.assert_allclose(out, spatial_reference(f, cbam8), rtol=1e-6)

    def test_zero_parameters_give_half(self, cbam8, rng):
        out = spatial_attention(Tensor(rng.standard_normal((2, 8, 4, 6))), zeroed(cbam8)).data
        assert out.shape == (2, 1, 4, 6)
        np.testing.assert_array_equal(out, 0.5)


class TestRefine:
    def test_zero_parameters_quarter_the_input(self, cbam8, rng):
        f = rng.standard_normal((2, 8, 5, 5))
        np.testing.assert_array_equal(cbam_refine(Tensor(f), zeroed(cbam8)).data, 0.25 * f)

    def test_float32_zero_parameters_quarter_the_input(self, rng):
        cbam = zeroed(build_cbam(CbamConfig(channels=32)))
        f = rng.standard_normal((1, 32, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(cbam_refine(Tensor(f), cbam).data, np.float32(0.25) * f)

    def test_sequential_composition(self, cbam8, rng):
        f = Tensor(rng.standard_normal((2, 8, 5, 5)))
        maps = cbam8.attention_maps(f)
        refined = f.data * maps.channel.data
        np.testing.assert_array_equal(cbam_refine(f, cbam8).data, refined * maps.spatial.data)

    def test_maps_inside_unit_interval(self, cbam8, rng):
        for scale in (1.0, 100.0):
            maps = cbam8.attention_maps(Tensor(rng.standard_normal((2, 8, 5, 5)) * scale))
            for m in (maps.channel.data, maps.spatial.data):
                assert np.all(m > 0.0) and np.all(m < 1.0)

    def test_contraction(self, cbam8, rng):
        f = rng.standard_normal((1, 8, 6, 6))
        out = cbam_refine(Tensor(f), cbam8).data
        assert np.all(np.abs(out) < np.abs(f))

    def test_zero_input_gives_zero(self, cbam8):
        out = cbam_refine(Tensor(np.zeros((1, 8, 4, 4))), cbam8).data
        np.testing.assert_array_equal(out, 0.0)

    @pytest.mark.parametrize("case", range(3))
    def test_gradients(self, case):
        cbam, f = random_cbam(200 + case)
        f = Tensor(f, requires_grad=True)
        r = np.random.default_rng(case).standard_normal(f.shape)
        err = finite_diff_check(lambda x, *_: (cbam_refine(x, cbam) * r).sum(), [f, *cbam.parameters()],
                                eps=1e-5)
        assert err <= 1e-5

    def test_gradients_reference_block(self, cbam8, rng):
        f = Tensor(rng.standard_normal((2, 8, 5, 5)), requires_grad=True)
        r = rng.standard_normal((2, 8, 5, 5))
        err = finite_diff_check(lambda x, *_: (cbam_refine(x, cbam8) * r).sum(), [f, *cbam8.parameters()])
        assert err <= 1e-5
