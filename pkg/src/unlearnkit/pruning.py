"""Structured L2 pruning with persistent masks.

Structures are output channels (conv), output rows (linear), or whole
heads (attention). Pruned structures are zeroed and masked rather than
physically removed, so tensor shapes and checkpoints stay stable; the
optimizer and `enforce_masks` keep them at exactly zero afterwards.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, StateError
from .layers import Conv2d, Linear, MultiHeadAttention

SELECTORS = ("all-conv", "last-linear", "last-attention")


@dataclass
class PruneTargetSpec:
    """Which layers to prune and how hard. `selector` is one of the named
    selectors, an explicit layer path, or a list mixing both."""

    selector: object = "all-conv"
    sparsity: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.sparsity < 1.0):
            raise ConfigError(f"sparsity must be in [0,1), got {self.sparsity}")

    def selectors(self):
        if isinstance(self.selector, (list, tuple)):
            return list(self.selector)
        return [self.selector]


def compute_structure_norms(param_value, axis=0):
    """L2 norm of each slice of `param_value` along `axis`."""
    arr = np.asarray(param_value)
    if not (-arr.ndim <= axis < arr.ndim):
        raise ConfigError(f"axis {axis} invalid for shape {arr.shape}")
    moved = np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)
    return np.sqrt((moved.astype(np.float64) ** 2).sum(axis=1))


def prune_count(n, sparsity):
    """floor(sparsity * n), evaluated exactly rather than in float."""
    return int(math.floor(Fraction(float(sparsity)) * n))


def select_prune_set(norms, sparsity):
    """Indices of the floor(sparsity*n) smallest norms, ties to the lowest
    index, returned sorted ascending."""
    norms = np.asarray(norms)
    if not (0.0 <= sparsity < 1.0):
        raise ConfigError(f"sparsity must be in [0,1), got {sparsity}")
    k = prune_count(norms.shape[0], sparsity)
    order = np.argsort(norms, kind="stable")
    return np.sort(order[:k])


def resolve_prune_targets(model, selectors):
    """Map selectors to layers: (path, layer) pairs, deduplicated in model order."""
    named = list(model.named_layers())
    chosen = {}
    for sel in selectors:
        if sel == "all-conv":
            hits = [(p, l) for p, l in named if isinstance(l, Conv2d)]
        elif sel == "last-linear":
            hits = [(p, l) for p, l in named if isinstance(l, Linear) and l.role != "head"][-1:]
        elif sel == "last-attention":
            hits = [(p, l) for p, l in named if isinstance(l, MultiHeadAttention)][-1:]
        else:
            hits = [(p, l) for p, l in named if p == sel]
        if not hits:
            raise ConfigError(f"prune selector {sel!r} matched no layers")
        for p, l in hits:
            chosen.setdefault(p, l)
    return list(chosen.items())


def _mask_rows(param, dead, axis):
    mask = np.ones(param.value.shape, dtype=bool)
    sl = [slice(None)] * param.value.ndim
    sl[axis] = dead
    mask[tuple(sl)] = False
    param.value[~mask] = 0.0
    param.mask = mask
    param.mask_axis = axis


def _prune_rows(layer, sparsity):
    w = layer.params["weight"]
    norms = compute_structure_norms(w.value, axis=0)
    dead = select_prune_set(norms, sparsity)
    _mask_rows(w, dead, 0)
    _mask_rows(layer.params["bias"], dead, 0)


def _prune_heads(layer, sparsity):
    h, dh, d = layer.heads, layer.head_dim, layer.dim
    sq_norms = np.zeros(h)
    for pname in ("wq", "wk", "wv"):
        per_head = layer.params[pname].value.reshape(h, dh * d).astype(np.float64)
        sq_norms += (per_head**2).sum(axis=1)
    wo_heads = layer.params["wo"].value.reshape(d, h, dh).astype(np.float64)
    sq_norms += (wo_heads**2).sum(axis=(0, 2))
    dead_heads = select_prune_set(np.sqrt(sq_norms), sparsity)
    dead_rows = (dead_heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
    for pname in ("wq", "wk", "wv"):
        _mask_rows(layer.params[pname], dead_rows, 0)
    for pname in ("bq", "bk", "bv"):
        _mask_rows(layer.params[pname], dead_rows, 0)
    _mask_rows(layer.params["wo"], dead_rows, 1)


def apply_prune(model, spec):
    """Zero the lowest-norm structures of every target layer and record masks.

    Returns {param_path: mask}. Re-pruning an already-masked target is a
    StateError so sparsity levels cannot silently compound.
    """
    targets = resolve_prune_targets(model, spec.selectors())
    for path, layer in targets:
        for pname, p in layer.params.items():
            if p.mask is not None:
                raise StateError(f"layer '{path}' is already pruned")
    masks = {}
    for path, layer in targets:
        if isinstance(layer, MultiHeadAttention):
            _prune_heads(layer, spec.sparsity)
        else:
            _prune_rows(layer, spec.sparsity)
        for pname, p in layer.params.items():
            if p.mask is not None:
                masks[f"{path}.{pname}"] = p.mask
    return masks


def enforce_masks(model):
    """Re-zero every masked weight. No-op on unmasked models; idempotent."""
    for _, p in model.named_params():
        if p.mask is not None:
            p.value[~p.mask] = 0.0


def sparsity_report(model):
    """Per masked layer: structure counts and the exact zero fraction of its
    masked weight tensors."""
    report = {}
    for path, layer in model.named_layers():
        masked = [p for p in layer.params.values() if p.mask is not None]
        if not masked:
            continue
        if isinstance(layer, MultiHeadAttention):
            alive = layer.params["wv"].mask.reshape(layer.heads, -1).any(axis=1)
            total, pruned = layer.heads, int((~alive).sum())
        else:
            w = layer.params["weight"]
            alive = w.mask.reshape(w.mask.shape[0], -1).any(axis=1)
            total, pruned = w.mask.shape[0], int((~alive).sum())
        weights = [p for name, p in layer.params.items() if not name.startswith("b")]
        zeros = sum(int((p.value == 0).sum()) for p in weights if p.mask is not None)
        size = sum(p.size for p in weights if p.mask is not None)
        report[path] = {
            "total_structures": total,
            "pruned_structures": pruned,
            "zero_fraction": zeros / size,
        }
    return report
