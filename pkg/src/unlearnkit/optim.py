"""Adam optimizer over Param objects.

Frozen parameters are never touched (no moment state is even allocated
for them). For masked parameters the gradient is blanked on dead
structures before the moment update and the value is re-zeroed after the
step, so pruned structures stay at exactly zero through training.
"""

import numpy as np

from .errors import DimensionError


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.params = [p for p in params if p.trainable]
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def state_elements(self):
        return 2 * sum(p.size for p in self.params)


def adam_step(state):
    """One Adam update of every tracked parameter from its accumulated grad."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g.shape != p.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        if p.mask is not None:
            g = g * p.mask
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.value -= update.astype(p.value.dtype, copy=False)
        if p.mask is not None:
            p.value[~p.mask] = 0.0


class Adam(AdamState):
    """Convenience wrapper so call sites can say opt.step()."""

    def step(self):
        adam_step(self)
