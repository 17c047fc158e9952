"""Model container and the two desk-scale architectures.

A Model is an ordered list of layers ending in a K-way linear head. Both
builders are deterministic given their seed: the same seed produces
bit-identical parameters.
"""

import numpy as np

from .errors import ConfigError
from .layers import (
    GELU,
    Conv2d,
    Flatten,
    Layer,
    LayerNorm,
    Linear,
    MeanPool,
    MultiHeadAttention,
    PatchEmbed,
    ReLU,
    ResidualBlock,
)


class Model:
    """Ordered layer stack producing (N, class_count) logits."""

    def __init__(self, layers, class_count, name, descriptor=None):
        self.layers = list(layers)
        self.class_count = class_count
        self.name = name
        self.descriptor = descriptor

    def forward(self, batch, train=False):
        y = np.asarray(batch)
        if y.ndim == 4:
            # external contract is (N,C,H,W); layers run channels-last
            y = np.ascontiguousarray(y.transpose(0, 2, 3, 1))
        for layer in self.layers:
            y = layer.forward(y, train)
        return y

    def backward(self, grad_logits):
        g = np.asarray(grad_logits)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        if g.ndim == 4:
            g = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
        return g

    def named_layers(self):
        for layer in self.layers:
            yield from layer.named_layers()

    def named_params(self):
        for layer in self.layers:
            yield from layer.named_params()

    def named_adapters(self):
        """Yields (param_path, adapter) for every attached adapter."""
        for path, layer in self.named_layers():
            for pname, adapter in layer.adapters.items():
                yield f"{path}.{pname}", adapter

    def get_param(self, path):
        for name, p in self.named_params():
            if name == path:
                return p
        raise ConfigError(f"no parameter named '{path}'")

    def param_owner(self, path):
        """Returns (layer, local param name) owning the given parameter path."""
        for lpath, layer in self.named_layers():
            for pname in layer.params:
                if f"{lpath}.{pname}" == path:
                    return layer, pname
        raise ConfigError(f"no parameter named '{path}'")

    def trainable_params(self):
        out = [p for _, p in self.named_params() if p.trainable]
        for _, adapter in self.named_adapters():
            if adapter.a.trainable:
                out.append(adapter.a)
            if adapter.b.trainable:
                out.append(adapter.b)
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()
        for _, adapter in self.named_adapters():
            adapter.a.zero_grad()
            adapter.b.zero_grad()

    def set_all_trainable(self, flag):
        for _, p in self.named_params():
            p.trainable = flag

    @property
    def head(self):
        for layer in self.layers:
            if layer.role == "head":
                return layer
        raise ConfigError(f"model '{self.name}' has no head layer")


def count_params(model, trainable_only=False):
    """Total parameter elements, adapters included."""
    total = 0
    for _, p in model.named_params():
        if not trainable_only or p.trainable:
            total += p.size
    for _, adapter in model.named_adapters():
        if not trainable_only or adapter.a.trainable:
            total += adapter.a.size
        if not trainable_only or adapter.b.trainable:
            total += adapter.b.size
    return total


def _conv_block(name, c_in, c_out, stride, rng, dtype):
    body = [
        Conv2d("conv1", c_in, c_out, kernel=3, stride=stride, padding=1, rng=rng, dtype=dtype),
        LayerNorm("norm1", c_out, dtype=dtype),
        ReLU("act1"),
        Conv2d("conv2", c_out, c_out, kernel=3, stride=1, padding=1, rng=rng, dtype=dtype),
        LayerNorm("norm2", c_out, dtype=dtype),
        ReLU("act2"),
    ]
    skip = None
    if c_in != c_out or stride != 1:
        skip = Conv2d("skip", c_in, c_out, kernel=1, stride=stride, padding=0, rng=rng, dtype=dtype)
    return ResidualBlock(name, body, skip)


def build_small_cnn(channels, class_count, seed, in_channels=3, dtype=np.float32):
    """Residual CNN: stride-2 stem conv, one block per stage (stride 2 after
    the first), an extra block at the deepest width, mean pool, linear head."""
    if not channels:
        raise ConfigError("channel list must not be empty")
    rng = np.random.default_rng(seed)
    layers = [Conv2d("stem", in_channels, channels[0], kernel=3, stride=2, padding=1, rng=rng, dtype=dtype)]
    prev = channels[0]
    for i, c in enumerate(channels):
        layers.append(_conv_block(f"block{i + 1}", prev, c, 1 if i == 0 else 2, rng, dtype))
        prev = c
    layers.append(_conv_block(f"block{len(channels) + 1}", prev, prev, 1, rng, dtype))
    layers.append(MeanPool("pool"))
    head = Linear("head", prev, class_count, rng, dtype=dtype)
    head.role = "head"
    layers.append(head)
    descriptor = {
        "arch": "small-cnn",
        "channels": list(channels),
        "class_count": class_count,
        "in_channels": in_channels,
        "seed": seed,
    }
    return Model(layers, class_count, "small-cnn", descriptor)


def build_tiny_vit(patch, dim, heads, depth, class_count, seed, image_size=16, in_channels=3, dtype=np.float32):
    """Small vision transformer: patch embedding, `depth` pre-norm blocks of
    attention + MLP (each residual), mean pool over tokens, linear head."""
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} must be divisible by heads {heads}")
    if image_size % patch != 0:
        raise ConfigError(f"image size {image_size} must be divisible by patch {patch}")
    rng = np.random.default_rng(seed)
    layers = [PatchEmbed("embed", in_channels, image_size, patch, dim, rng, dtype=dtype)]
    hidden = 4 * dim
    for i in range(depth):
        layers.append(
            ResidualBlock(
                f"attn{i + 1}",
                [LayerNorm("norm", dim, dtype=dtype), MultiHeadAttention("mha", dim, heads, rng, dtype=dtype)],
            )
        )
        layers.append(
            ResidualBlock(
                f"mlp{i + 1}",
                [
                    LayerNorm("norm", dim, dtype=dtype),
                    Linear("fc1", dim, hidden, rng, dtype=dtype),
                    GELU("act"),
                    Linear("fc2", hidden, dim, rng, dtype=dtype),
                ],
            )
        )
    layers.append(MeanPool("pool"))
    head = Linear("head", dim, class_count, rng, dtype=dtype)
    head.role = "head"
    layers.append(head)
    descriptor = {
        "arch": "tiny-vit",
        "patch": patch,
        "dim": dim,
        "heads": heads,
        "depth": depth,
        "class_count": class_count,
        "image_size": image_size,
        "in_channels": in_channels,
        "seed": seed,
    }
    return Model(layers, class_count, "tiny-vit", descriptor)


def build_from_descriptor(descriptor, seed=None, dtype=np.float32):
    """Rebuild a model from the descriptor a builder recorded (and a
    checkpoint stored). `seed` overrides the recorded init seed."""
    desc = dict(descriptor)
    arch = desc.pop("arch", None)
    if seed is not None:
        desc["seed"] = seed
    if arch == "small-cnn":
        return build_small_cnn(
            desc["channels"], desc["class_count"], desc["seed"],
            in_channels=desc.get("in_channels", 3), dtype=dtype,
        )
    if arch == "tiny-vit":
        return build_tiny_vit(
            desc["patch"], desc["dim"], desc["heads"], desc["depth"],
            desc["class_count"], desc["seed"],
            image_size=desc.get("image_size", 16),
            in_channels=desc.get("in_channels", 3), dtype=dtype,
        )
    raise ConfigError(f"unknown architecture descriptor: {arch!r}")
