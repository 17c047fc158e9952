import numpy as np
import numpy.testing as npt
import pytest

from helpers import REL_TOL, fd_vs_analytic
from unlearnkit.errors import ConfigError, StateError
from unlearnkit.layers import Linear
from unlearnkit.lora import (
    LoraAdapter,
    LoraConfig,
    attach_adapters,
    lora_trainable_count,
    merge_adapter,
    merge_all,
)
from unlearnkit.models import Model, build_small_cnn, build_tiny_vit, count_params
from unlearnkit.optim import Adam
from unlearnkit.pruning import PruneTargetSpec, apply_prune, enforce_masks
from unlearnkit.tensor import softmax_cross_entropy


def two_linear_model(d=100, k=10, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    lin = Linear("lin", d, d, rng, dtype=dtype)
    head = Linear("head", d, k, rng, dtype=dtype)
    head.role = "head"
    return Model([lin, head], k, "two-linear")


def train_adapters_a_bit(model, x, labels, steps=20):
    opt = Adam(model.trainable_params())
    for _ in range(steps):
        logits = model.forward(x, train=True)
        _, g = softmax_cross_entropy(logits, labels)
        model.zero_grads()
        model.backward(g)
        opt.step()


class TestAttach:
    def test_forward_bit_identical_after_attach(self):
        m = build_small_cnn([6, 8], 5, seed=0, in_channels=1)
        x = np.random.default_rng(1).normal(size=(3, 1, 16, 16)).astype(np.float32)
        before = m.forward(x)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=2)
        npt.assert_array_equal(m.forward(x), before)

    def test_trainable_count_formula(self):
        m = two_linear_model()
        attach_adapters(m, LoraConfig(rank=4, alpha=8.0, selector="lin"), seed=0)
        adapters = dict(m.named_adapters())
        assert set(adapters) == {"lin.weight"}
        a = adapters["lin.weight"]
        assert a.a.size + a.b.size == 800  # 4 * (100 + 100)
        # with the head frozen, the adapters are the only trainable params
        for p in m.head.params.values():
            p.trainable = False
        assert count_params(m, trainable_only=True) == 800
        assert lora_trainable_count(m) == 800

    def test_rank_too_large_config_error(self):
        m = two_linear_model(d=6)
        with pytest.raises(ConfigError):
            attach_adapters(m, LoraConfig(rank=6, alpha=8.0, selector="lin"), seed=0)

    def test_double_attach_state_error(self):
        m = two_linear_model()
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="lin"), seed=0)
        with pytest.raises(StateError):
            attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="lin"), seed=0)

    def test_base_frozen_head_trainable(self):
        m = build_small_cnn([6, 8], 5, seed=3, in_channels=1)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=4)
        for name, p in m.named_params():
            if name.startswith("head."):
                assert p.trainable
            else:
                assert not p.trainable

    def test_last_attention_targets_q_and_v(self):
        m = build_tiny_vit(4, 16, 2, 2, 5, seed=5, image_size=8, in_channels=1)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="last-attention"), seed=6)
        targets = set(dict(m.named_adapters()))
        assert targets == {"attn2.mha.wq", "attn2.mha.wv"}


class TestForward:
    def test_hand_product(self):
        rng = np.random.default_rng(0)
        lin = Linear("lin", 2, 2, rng)
        lin.params["weight"].value = np.zeros((2, 2), dtype=np.float32)
        lin.adapters["weight"] = LoraAdapter(
            np.array([[1.0, 0.0]], dtype=np.float32),
            np.array([[2.0], [0.0]], dtype=np.float32),
            rank=1, alpha=1.0, target="lin.weight",
        )
        out = lin.forward(np.array([[1.0, 0.0]], dtype=np.float32), train=False)
        npt.assert_array_equal(out, np.array([[2.0, 0.0]]))

    def test_adapter_gradients_match_finite_differences(self):
        m = two_linear_model(d=8, k=3, dtype=np.float64)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="lin"), seed=1)
        adapter = dict(m.named_adapters())["lin.weight"]
        rng = np.random.default_rng(2)
        adapter.b.value = rng.normal(0.0, 0.1, size=adapter.b.value.shape)  # off the B=0 point
        x = rng.normal(size=(4, 8))
        labels = rng.integers(0, 3, size=4)

        logits = m.forward(x, train=True)
        _, g = softmax_cross_entropy(logits, labels)
        m.zero_grads()
        m.backward(g)

        def loss_fn():
            return softmax_cross_entropy(m.forward(x, train=False), labels)[0]

        for p in (adapter.a, adapter.b):
            coords = rng.choice(p.size, size=min(10, p.size), replace=False)
            worst, checked, _ = fd_vs_analytic(loss_fn, p.value, p.grad, coords)
            assert checked > 0
            assert worst < REL_TOL


class TestMerge:
    def test_merge_equivalence_after_training(self):
        m = build_small_cnn([6, 8], 5, seed=7, in_channels=1)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=8)
        rng = np.random.default_rng(9)
        x = rng.normal(0.5, 0.3, size=(8, 1, 16, 16)).astype(np.float32)
        train_adapters_a_bit(m, x, rng.integers(0, 5, size=8))
        probe = rng.normal(0.5, 0.3, size=(100, 1, 16, 16)).astype(np.float32)
        unmerged = m.forward(probe)
        merge_all(m)
        assert not dict(m.named_adapters())
        merged = m.forward(probe)
        assert np.abs(merged - unmerged).max() < 1e-5

    def test_merge_with_zero_b_keeps_weights_bit_exact(self):
        m = two_linear_model()
        attach_adapters(m, LoraConfig(rank=4, alpha=8.0, selector="lin"), seed=0)
        before = m.get_param("lin.weight").value.copy()
        merge_adapter(m.layers[0], "weight")
        npt.assert_array_equal(m.get_param("lin.weight").value, before)

    def test_merge_without_adapter_state_error(self):
        m = two_linear_model()
        with pytest.raises(StateError):
            merge_adapter(m.layers[0], "weight")

    def test_merge_then_enforce_keeps_pruned_structures_zero(self):
        m = build_small_cnn([6, 8], 5, seed=10, in_channels=1)
        apply_prune(m, PruneTargetSpec("all-conv", 0.5))
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(0.5, 0.3, size=(8, 1, 16, 16)).astype(np.float32)
        train_adapters_a_bit(m, x, rng.integers(0, 5, size=8))
        probe = rng.normal(0.5, 0.3, size=(50, 1, 16, 16)).astype(np.float32)
        unmerged = m.forward(probe)
        merge_all(m)
        enforce_masks(m)
        # dead structures stay exactly zero and the forward is preserved
        for _, p in m.named_params():
            if p.mask is not None and (~p.mask).any():
                assert np.abs(p.value[~p.mask]).max() == 0.0
        assert np.abs(m.forward(probe) - unmerged).max() < 1e-5


class TestTrainingContract:
    def test_frozen_base_bit_identical_through_training(self):
        m = build_small_cnn([6, 8], 5, seed=13, in_channels=1)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=14)
        base_before = {
            k: p.value.copy() for k, p in m.named_params() if not k.startswith("head.")
        }
        rng = np.random.default_rng(15)
        x = rng.normal(0.5, 0.3, size=(8, 1, 16, 16)).astype(np.float32)
        train_adapters_a_bit(m, x, rng.integers(0, 5, size=8), steps=30)
        for k, value in base_before.items():
            npt.assert_array_equal(m.get_param(k).value, value)

    def test_adapters_move_during_training(self):
        m = build_small_cnn([6, 8], 5, seed=16, in_channels=1)
        attach_adapters(m, LoraConfig(rank=2, alpha=4.0, selector="all-conv"), seed=17)
        rng = np.random.default_rng(18)
        x = rng.normal(0.5, 0.3, size=(8, 1, 16, 16)).astype(np.float32)
        train_adapters_a_bit(m, x, rng.integers(0, 5, size=8), steps=5)
        moved = [np.abs(a.b.value).max() for _, a in m.named_adapters()]
        assert max(moved) > 0.0

    def test_desk_default_trainable_fraction_below_10_percent(self):
        for arch, lora_sel in (("cnn", "all-conv"), ("vit", "last-attention")):
            if arch == "cnn":
                m = build_small_cnn([16, 32, 64], 10, seed=19)
            else:
                m = build_tiny_vit(4, 64, 4, 4, 10, seed=19)
            total = count_params(m)
            attach_adapters(m, LoraConfig(rank=4, alpha=8.0, selector=lora_sel), seed=20)
            assert count_params(m, trainable_only=True) < 0.10 * total, arch
