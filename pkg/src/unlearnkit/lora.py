"""Low-rank adapters over frozen base weights.

An adapter adds scale * B @ A to a weight viewed as (d_out, d_in); conv
kernels use their im2col-flattened (out_channels, c_in*kh*kw) view. At
attach time B is zero, so the adapted model computes exactly what the
base model did. Merging folds the update into the base weight and drops
the adapter.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .layers import Conv2d, Linear, MultiHeadAttention, Param

# Which weights of an attention layer receive adapters (query and value
# projections, the usual low-rank targeting).
ATTENTION_ADAPTER_PARAMS = ("wq", "wv")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    selector: object = "all-conv"

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def selectors(self):
        if isinstance(self.selector, (list, tuple)):
            return list(self.selector)
        return [self.selector]


class LoraAdapter:
    """Trainable factors A (rank, d_in) and B (d_out, rank) for one weight."""

    def __init__(self, a, b, rank, alpha, target):
        self.a = a if isinstance(a, Param) else Param(a)
        self.b = b if isinstance(b, Param) else Param(b)
        self.rank = rank
        self.alpha = alpha
        self.target = target

    @property
    def scale(self):
        return self.alpha / self.rank

    def delta(self):
        """The effective weight update scale * B @ A as a (d_out, d_in) matrix."""
        return self.scale * (self.b.value @ self.a.value)


def resolve_lora_targets(model, selectors):
    """Resolve selectors to (param_path, layer, param_name) triples."""
    named = list(model.named_layers())
    triples = {}

    def add(path, layer, pnames):
        for pname in pnames:
            triples.setdefault(f"{path}.{pname}", (layer, pname))

    for sel in selectors:
        if sel == "all-conv":
            hits = [(p, l) for p, l in named if isinstance(l, Conv2d)]
            if not hits:
                raise ConfigError("adapter selector 'all-conv' matched no layers")
            for p, l in hits:
                add(p, l, ("weight",))
        elif sel == "last-linear":
            hits = [(p, l) for p, l in named if isinstance(l, Linear) and l.role != "head"]
            if not hits:
                raise ConfigError("adapter selector 'last-linear' matched no layers")
            add(*hits[-1], ("weight",))
        elif sel == "last-attention":
            hits = [(p, l) for p, l in named if isinstance(l, MultiHeadAttention)]
            if not hits:
                raise ConfigError("adapter selector 'last-attention' matched no layers")
            add(*hits[-1], ATTENTION_ADAPTER_PARAMS)
        else:
            hits = [(p, l) for p, l in named if p == sel]
            if not hits:
                raise ConfigError(f"adapter selector {sel!r} matched no layers")
            for p, l in hits:
                if isinstance(l, MultiHeadAttention):
                    add(p, l, ATTENTION_ADAPTER_PARAMS)
                elif "weight" in l.params:
                    add(p, l, ("weight",))
                else:
                    raise ConfigError(f"layer {p!r} has no adapter-capable weight")
    return [(path, layer, pname) for path, (layer, pname) in triples.items()]


def _flat_dims(param_value):
    d_out = param_value.shape[0]
    return d_out, param_value.size // d_out


def attach_adapters(model, cfg, seed):
    """Attach zero-initialized adapters to every target weight.

    Freezes the whole base model except the classifier head; afterwards
    the adapters (A ~ Gaussian(0, 1/rank), B = 0) and the head are the
    only trainable parameters, and the forward pass is bit-identical to
    the pre-attach model until training moves B away from zero.
    """
    targets = resolve_lora_targets(model, cfg.selectors())
    for path, layer, pname in targets:
        if pname in layer.adapters:
            raise StateError(f"parameter '{path}' already has an adapter")
        d_out, d_in = _flat_dims(layer.params[pname].value)
        if cfg.rank >= min(d_in, d_out):
            raise ConfigError(
                f"rank {cfg.rank} must be smaller than min(d_in={d_in}, d_out={d_out}) for '{path}'"
            )
    rng = np.random.default_rng(seed)
    head = model.head
    for _, p in model.named_params():
        p.trainable = False
    for p in head.params.values():
        p.trainable = True
    for path, layer, pname in targets:
        dtype = layer.params[pname].value.dtype
        d_out, d_in = _flat_dims(layer.params[pname].value)
        a = rng.normal(0.0, 1.0 / cfg.rank, size=(cfg.rank, d_in)).astype(dtype)
        b = np.zeros((d_out, cfg.rank), dtype=dtype)
        layer.adapters[pname] = LoraAdapter(a, b, cfg.rank, cfg.alpha, path)


def merge_adapter(layer, pname="weight"):
    """Fold the adapter update into the base weight and remove the adapter."""
    if pname not in layer.adapters:
        raise StateError(f"layer '{layer.name}' has no adapter on '{pname}'")
    adapter = layer.adapters.pop(pname)
    p = layer.params[pname]
    p.value += layer.fold_flat(pname, adapter.delta()).astype(p.value.dtype, copy=False)
    return adapter


def merge_all(model):
    """Merge every attached adapter. Masked weights need `enforce_masks`
    afterwards to keep pruned structures at exactly zero."""
    for path, layer in model.named_layers():
        for pname in list(layer.adapters):
            merge_adapter(layer, pname)


def lora_trainable_count(model):
    """Adapter elements rank*(d_in+d_out) per target, plus unfrozen head params."""
    total = 0
    for _, adapter in model.named_adapters():
        total += adapter.a.size + adapter.b.size
    for p in model.head.params.values():
        if p.trainable:
            total += p.size
    return total
