"""MCD-Net assembly: shapes, registry, initialisation, ASPP, decoder and prediction."""
import numpy as np
import pytest
from pydantic import ValidationError

from mcdnet.complexity import count_params
from mcdnet.config import ModelConfig
from mcdnet.errors import ConfigError, ShapeError
from mcdnet.model import (
    McdNetModel,
    aspp_forward,
    backbone_forward,
    build_model,
    make_divisible,
    model_forward,
    pad_to_stride,
    predict,
    predict_image,
)
from mcdnet.tensor import Tensor, no_grad


def images(rng, n=1, size=64, dtype=np.float32):
    return Tensor(rng.uniform(0.0, 1.0, (n, 3, size, size)).astype(dtype))


class TestShapes:
    def test_feature_strides(self, tiny_model, rng):
        taps = {}
        with no_grad():
            logits = tiny_model(images(rng, n=2), taps=taps)
        assert logits.shape == (2, 2, 64, 64)
        assert taps["F_base"].shape == (2, tiny_model.backbone.out_channels, 4, 4)
        assert taps["F_low"].shape == (2, tiny_model.backbone.low_level_channels, 16, 16)
        assert taps["F_att"].shape == taps["F_base"].shape
        assert taps["F_aspp"].shape[2:] == (4, 4)

    def test_output_stride_8(self, rng):
        model = build_model(ModelConfig(channel_scale=0.25, output_stride=8))
        with no_grad():
            base, low = backbone_forward(model, images(rng))
            logits = model(images(rng))
        assert base.shape[2:] == (8, 8) and low.shape[2:] == (16, 16)
        assert logits.shape == (1, 2, 64, 64)

    def test_model_forward_matches_call(self, tiny_model, rng):
        x = images(rng, size=32)
        tiny_model.eval()
        with no_grad():
            np.testing.assert_array_equal(model_forward(tiny_model, x).data, tiny_model(x).data)

    def test_rejects_sizes_not_divisible_by_stride(self, tiny_model, rng):
        with pytest.raises(ShapeError):
            tiny_model(images(rng, size=40))

    def test_rejects_wrong_channel_count(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model(Tensor(np.zeros((1, 1, 32, 32), np.float32)))

    def test_make_divisible(self):
        assert make_divisible(6) == 8
        assert make_divisible(320 * 0.25) == 80
        assert make_divisible(1280) == 1280


class TestRegistry:
    def test_cbam_adds_only_cbam_parameters(self):
        with_cbam = {n for n, _ in McdNetModel(ModelConfig(channel_scale=0.25)).named_parameters()}
        without = {n for n, _ in McdNetModel(ModelConfig(channel_scale=0.25, use_cbam=False)).named_parameters()}
        extra = with_cbam - without
        assert without < with_cbam
        assert extra and all(n.startswith("cbam.") for n in extra)

    def test_same_seed_same_weights(self, tiny_config):
        a, b = build_model(tiny_config, seed=4), build_model(tiny_config, seed=4)
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_different_seed_different_weights(self, tiny_config):
        a, b = build_model(tiny_config, seed=4), build_model(tiny_config, seed=5)
        assert not np.array_equal(a.backbone.features[0].conv.weight.data, b.backbone.features[0].conv.weight.data)

    def test_cbam_parameter_overhead_below_two_percent(self):
        plain = count_params(McdNetModel(ModelConfig(use_cbam=False)))
        attended = count_params(McdNetModel(ModelConfig(use_cbam=True)))
        assert 0 < attended - plain < 0.02 * plain

    def test_reduction_wider_than_backbone_is_a_config_error(self):
        with pytest.raises(ConfigError, match="320 backbone channels"):
            McdNetModel(ModelConfig(channel_scale=0.25, cbam_reduction=1000))
        assert McdNetModel(ModelConfig(channel_scale=0.25, use_cbam=False, cbam_reduction=1000)).cbam is None

    def test_even_attention_kernel_rejected_at_load(self):
        with pytest.raises(ValidationError):
            ModelConfig(cbam_kernel=4)


class TestAspp:
    def test_constant_input_gives_spatially_constant_output(self, tiny_model):
        tiny_model.eval()
        c = tiny_model.backbone.out_channels
        x = np.ones((1, c, 4, 4), np.float32) * np.linspace(0.0, 2.0, c, dtype=np.float32).reshape(1, c, 1, 1)
        with no_grad():
            out = aspp_forward(tiny_model, Tensor(x)).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), rtol=1e-6, atol=1e-6)

    def test_atrous_branch_impulse_response(self, tiny_model):
        branch = tiny_model.aspp.b1.conv
        rate = branch.dilation
        size = 2 * rate + 3
        x = np.zeros((1, branch.in_channels, size, size), np.float32)
        center = size // 2
        x[0, 0, center, center] = 1.0
        with no_grad():
            out = branch(Tensor(x)).data
        support = np.argwhere(np.any(out[0] != 0.0, axis=0))
        offsets = support - center
        assert np.all(offsets % rate == 0)
        assert len(support) == 9

    def test_pooled_branch_broadcasts(self, tiny_model, rng):
        tiny_model.eval()
        c = tiny_model.backbone.out_channels
        with no_grad():
            out = tiny_model.aspp.pool(Tensor(rng.standard_normal((1, c, 3, 5)).astype(np.float32))).data
        assert out.shape[2:] == (3, 5)
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), rtol=1e-6)


class TestDecoder:
    def test_gradient_reaches_both_inputs(self, tiny_model, rng):
        taps = {}
        logits = tiny_model(images(rng, n=2), taps=taps)
        taps["F_aspp"].retain_grad()
        taps["F_low"].retain_grad()
        (logits * rng.standard_normal(logits.shape)).sum().backward()
        assert np.any(taps["F_aspp"].grad != 0.0)
        assert np.any(taps["F_low"].grad != 0.0)

    def test_stride_mismatch(self, tiny_model):
        c_aspp = tiny_model.aspp.out_channels
        c_low = tiny_model.backbone.low_level_channels
        with pytest.raises(ShapeError):
            tiny_model.decoder(Tensor(np.zeros((1, c_aspp, 4, 4), np.float32)),
                               Tensor(np.zeros((1, c_low, 8, 8), np.float32)))


class TestAttentionPath:
    def test_bypassed_cbam_equals_plain_model(self, rng):
        attended = build_model(ModelConfig(channel_scale=0.25, use_cbam=True), seed=2, dtype=np.float64).eval()
        plain = build_model(ModelConfig(channel_scale=0.25, use_cbam=False), seed=2, dtype=np.float64).eval()
        x = images(rng, dtype=np.float64)
        with no_grad():
            np.testing.assert_array_equal(attended(x, use_attention=False).data, plain(x).data)

    def test_forcing_attention_without_cbam(self, rng):
        plain = build_model(ModelConfig(channel_scale=0.25, use_cbam=False))
        with pytest.raises(ShapeError):
            plain(images(rng), use_attention=True)


class TestPredict:
    def test_ties_go_to_background(self):
        assert np.all(predict(np.zeros((1, 2, 3, 3))) == 0)

    def test_invariant_to_per_pixel_shift(self, rng):
        logits = rng.standard_normal((2, 2, 5, 5))
        shift = rng.standard_normal((2, 1, 5, 5)) * 10.0
        np.testing.assert_array_equal(predict(logits), predict(logits + shift))

    def test_predict_image_any_size(self, tiny_model, rng):
        mask = predict_image(tiny_model, rng.uniform(0, 1, (3, 50, 40)).astype(np.float32))
        assert mask.shape == (50, 40)
        assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1}

    def test_pad_to_stride(self):
        padded = pad_to_stride(np.ones((3, 17, 32)), 16)
        assert padded.shape == (3, 32, 32)
        assert padded[:, 17:].sum() == 0.0
