import numpy as np
import numpy.testing as npt
import pytest

from helpers import REL_TOL, layer_gradcheck
from unlearnkit.errors import ConfigError, StateError
from unlearnkit.layers import (
    GELU,
    Conv2d,
    Flatten,
    LayerNorm,
    Linear,
    MeanPool,
    MultiHeadAttention,
    PatchEmbed,
    ReLU,
    ResidualBlock,
)
from unlearnkit.models import _conv_block


def image(rng, n=2, h=7, w=7, c=3):
    return rng.normal(0.2, 0.6, size=(n, h, w, c))


def make_layer(kind, rng):
    if kind == "Linear":
        return Linear("lin", 5, 4, rng, dtype=np.float64), rng.normal(size=(3, 5))
    if kind == "Conv2d":
        return Conv2d("conv", 3, 4, kernel=3, stride=2, padding=1, rng=rng, dtype=np.float64), image(rng)
    if kind == "MultiHeadAttention":
        return MultiHeadAttention("mha", 8, 2, rng, dtype=np.float64), rng.normal(size=(2, 5, 8))
    if kind == "LayerNorm":
        return LayerNorm("ln", 6, dtype=np.float64), rng.normal(size=(2, 4, 6))
    if kind == "ReLU":
        return ReLU("relu"), rng.normal(size=(2, 5, 6)) + 0.05
    if kind == "GELU":
        return GELU("gelu"), rng.normal(size=(2, 5, 6))
    if kind == "PatchEmbed":
        return PatchEmbed("embed", 3, 8, 4, 10, rng, dtype=np.float64), image(rng, h=8, w=8)
    if kind == "ResidualBlock":
        return _conv_block("block", 3, 5, 2, rng, np.float64), image(rng)
    if kind == "Flatten":
        return Flatten("flat"), image(rng)
    if kind == "MeanPool":
        return MeanPool("pool"), image(rng)
    raise AssertionError(kind)


ALL_KINDS = [
    "Linear", "Conv2d", "MultiHeadAttention", "LayerNorm", "ReLU",
    "GELU", "PatchEmbed", "ResidualBlock", "Flatten", "MeanPool",
]


class TestGradients:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_layer_gradcheck(self, kind):
        worst_overall = 0.0
        checked_total = 0
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            layer, x = make_layer(kind, rng)
            worst, checked, _ = layer_gradcheck(layer, x, rng)
            worst_overall = max(worst_overall, worst)
            checked_total += checked
        assert checked_total > 10
        assert worst_overall < REL_TOL, f"{kind}: rel err {worst_overall:.2e}"


class TestLayerContracts:
    def test_backward_without_forward_raises(self):
        rng = np.random.default_rng(0)
        layer = Linear("lin", 3, 2, rng)
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 2)))

    def test_cache_invalidated_after_backward(self):
        rng = np.random.default_rng(0)
        layer = Linear("lin", 3, 2, rng)
        layer.forward(np.zeros((1, 3), dtype=np.float32), train=True)
        layer.backward(np.ones((1, 2), dtype=np.float32))
        with pytest.raises(StateError):
            layer.backward(np.ones((1, 2), dtype=np.float32))

    def test_eval_forward_does_not_enable_backward(self):
        rng = np.random.default_rng(0)
        layer = Linear("lin", 3, 2, rng)
        layer.forward(np.zeros((1, 3), dtype=np.float32), train=False)
        with pytest.raises(StateError):
            layer.backward(np.ones((1, 2), dtype=np.float32))

    def test_frozen_params_receive_zero_grad(self):
        rng = np.random.default_rng(1)
        layer = Linear("lin", 4, 3, rng, dtype=np.float64)
        for p in layer.params.values():
            p.trainable = False
        layer.forward(rng.normal(size=(2, 4)), train=True)
        layer.backward(rng.normal(size=(2, 3)))
        for p in layer.params.values():
            npt.assert_array_equal(p.grad, 0.0)

    def test_two_backward_passes_double_gradient(self):
        rng = np.random.default_rng(2)
        layer = Conv2d("conv", 2, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(1, 5, 5, 2))
        g = rng.normal(size=(1, 5, 5, 3))
        layer.forward(x, train=True)
        layer.backward(g)
        single = {k: p.grad.copy() for k, p in layer.params.items()}
        layer.forward(x, train=True)
        layer.backward(g)
        for k, p in layer.params.items():
            npt.assert_array_equal(p.grad, 2.0 * single[k])


class TestAttention:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention("mha", 8, 4, rng, dtype=np.float64)
        mha.forward(rng.normal(size=(2, 6, 8)), train=False)
        npt.assert_allclose(mha.attn_weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_dim_not_divisible_by_heads(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention("mha", 10, 4, np.random.default_rng(0))


class TestResidualBlock:
    def test_identity_skip_adds_input(self):
        rng = np.random.default_rng(4)
        block = ResidualBlock("b", [ReLU("act")])
        x = rng.normal(size=(2, 3))
        npt.assert_array_equal(block.forward(x, train=False), np.maximum(x, 0) + x)

    def test_projection_skip_created_on_shape_change(self):
        rng = np.random.default_rng(5)
        block = _conv_block("b", 3, 5, 2, rng, np.float32)
        assert block.skip is not None and block.skip.kind == "Conv2d"
        same = _conv_block("b", 3, 3, 1, rng, np.float32)
        assert same.skip is None


class TestPatchEmbed:
    def test_requires_divisible_image(self):
        with pytest.raises(ConfigError):
            PatchEmbed("embed", 3, 10, 4, 8, np.random.default_rng(0))

    def test_token_count(self):
        rng = np.random.default_rng(6)
        pe = PatchEmbed("embed", 3, 8, 4, 16, rng, dtype=np.float64)
        out = pe.forward(image(rng, h=8, w=8), train=False)
        assert out.shape == (2, 4, 16)
