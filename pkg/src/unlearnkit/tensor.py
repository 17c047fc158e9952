"""Dense array primitives: matmul, 2-D convolution, softmax cross-entropy,
and a central-difference gradient oracle.

Values are plain numpy arrays, float32 by default. Everything accepts
float64 arrays unchanged, which is what the gradient-check tests use to
keep finite differences sharp. All reductions use numpy's deterministic
evaluation, so identical inputs give bit-identical outputs.
"""

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float32


def check_finite(arr, context):
    """Raise NumericError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced in {context}")


def matmul(a, b):
    """Matrix product of a (m,k) and b (k,n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def unfold_nhwc(x, kh, kw, stride, padding):
    """Unfold channels-last (N,H,W,C) into patch rows (N*H'*W', kh*kw*C).

    Channels-last keeps each (kw, C) window chunk contiguous, so the copy
    into patch rows runs at memcpy speed instead of gathering elements.
    """
    n, h, w, c = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (n, oh, ow, c, kh, kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return np.ascontiguousarray(cols), oh, ow


def fold_nhwc(cols, x_shape, kh, kw, stride, padding):
    """Scatter-add patch-row gradients back to the (N,H,W,C) input layout."""
    n, h, w, c = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    g = cols.reshape(n, oh, ow, kh, kw, c)
    gpad = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += g[:, :, :, i, j, :]
    if padding:
        return np.ascontiguousarray(gpad[:, padding : padding + h, padding : padding + w, :])
    return gpad


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of x (N,C,H,W) with kernel (O,C,kh,kw), zero padded.

    No kernel flip is applied; this is the usual deep-learning convention.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}")
    n, c, _, _ = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    cols, oh, ow = unfold_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), kh, kw, stride, padding)
    out = cols @ kernel.transpose(0, 2, 3, 1).reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of logits (N,K) and int labels (N,).

    Returns (loss, grad_logits) with grad = (softmax - onehot) / N.
    Stabilized by max subtraction so large logits cannot overflow.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"cross-entropy expects logits (N,K) with labels (N,), got {logits.shape} / {labels.shape}"
        )
    n, k = logits.shape
    if n < 1:
        raise DimensionError("cross-entropy needs at least one sample")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype, copy=False)


def finite_difference_grad(f, x, eps=1e-4):
    """Central-difference gradient of scalar f at x, element by element.

    Mutates x in place for the probes and restores it afterwards. Meant as
    a test oracle in float64; eps defaults to 1e-4 which is near-optimal
    for 64-bit central differences at unit scale.
    """
    x = np.asarray(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(f(x))
        x[idx] = orig - eps
        fm = float(f(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function returned non-finite value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad
