"""Shared test utilities, mainly the finite-difference gradient checker.

The checker compares backprop gradients against central differences
(float64, eps 1e-4). Two classes of probe are excluded because the FD
oracle itself is invalid there, not the analytic gradient:

* probes whose +eps/-eps evaluations land on different sides of a ReLU
  kink (the loss is not differentiable across the kink), detected by
  comparing activation sign patterns between the two probe points;
* probes where halving eps changes the FD estimate materially, meaning
  truncation error dominates (happens near sharp curvature, e.g. layer
  norm over few channels at tiny variance).
"""

import numpy as np

from unlearnkit.layers import ReLU
from unlearnkit.tensor import softmax_cross_entropy

EPS = 1e-4
REL_TOL = 1e-4


def _loss_and_signs(fn):
    """Evaluate fn() while recording the sign pattern at every ReLU."""
    signs = []
    orig = ReLU.forward

    def recording(self, inp, train=True):
        signs.append(inp > 0)
        return orig(self, inp, train)

    ReLU.forward = recording
    try:
        value = fn()
    finally:
        ReLU.forward = orig
    return value, signs


def _same_signs(a, b):
    return len(a) == len(b) and all(np.array_equal(s, t) for s, t in zip(a, b))


def fd_vs_analytic(loss_fn, param_value, analytic_grad, coords, eps=EPS):
    """Max relative FD-vs-analytic error over the probed coordinates.

    Returns (worst_rel_err, checked, skipped). `loss_fn` re-evaluates the
    scalar loss from current parameter values; `param_value` is mutated in
    place for the probes and restored.
    """
    flat = param_value.reshape(-1)
    aflat = analytic_grad.reshape(-1)
    worst, checked, skipped = 0.0, 0, 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp, sp = _loss_and_signs(loss_fn)
        flat[i] = orig - eps
        fm, sm = _loss_and_signs(loss_fn)
        flat[i] = orig + eps / 2
        fp2, _ = _loss_and_signs(loss_fn)
        flat[i] = orig - eps / 2
        fm2, _ = _loss_and_signs(loss_fn)
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        fd_half = (fp2 - fm2) / eps
        a = aflat[i]
        scale = max(abs(fd), abs(a), 1e-3)
        if not _same_signs(sp, sm) or abs(fd - fd_half) > 0.025 * scale:
            skipped += 1
            continue
        worst = max(worst, abs(a - fd) / scale)
        checked += 1
    return worst, checked, skipped


def model_gradcheck(model, x, labels, rng, coords_per_param=4, eps=EPS):
    """End-to-end check of every parameter of a model against FD.

    Returns (worst_rel_err, checked, skipped); `checked` must stay well
    above zero or the test is vacuous.
    """
    logits = model.forward(x, train=True)
    _, grad = softmax_cross_entropy(logits, labels)
    model.zero_grads()
    model.backward(grad)

    def loss_fn():
        value, _ = softmax_cross_entropy(model.forward(x, train=False), labels)
        return value

    worst, checked, skipped = 0.0, 0, 0
    for _, p in model.named_params():
        coords = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        w, c, s = fd_vs_analytic(loss_fn, p.value, p.grad, coords, eps)
        worst = max(worst, w)
        checked += c
        skipped += s
    return worst, checked, skipped


def layer_gradcheck(layer, x, rng, coords_per_param=6, eps=EPS, check_input=True):
    """Check one layer's parameter and input gradients against FD, using a
    fixed random linear projection of the output as the scalar loss."""
    y_shape = layer.forward(np.array(x, copy=True), train=False).shape
    proj = rng.normal(size=y_shape)

    def loss_fn():
        return float((layer.forward(x, train=False) * proj).sum())

    layer.forward(x, train=True)
    for _, p in layer.named_params():
        p.zero_grad()
    gx = layer.backward(proj)

    worst, checked, skipped = 0.0, 0, 0
    for _, p in layer.named_params():
        coords = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        w, c, s = fd_vs_analytic(loss_fn, p.value, p.grad, coords, eps)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    if check_input:
        coords = rng.choice(x.size, size=min(2 * coords_per_param, x.size), replace=False)
        w, c, s = fd_vs_analytic(loss_fn, x, gx, coords, eps)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    return worst, checked, skipped
