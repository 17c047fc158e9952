"""Layer zoo with explicit forward/backward passes.

Each layer owns named Param objects (value + accumulated gradient),
caches whatever the backward pass needs during a train-mode forward, and
invalidates that cache once backward has consumed it. Frozen parameters
never receive gradient; masked parameters keep their dead structures at
exactly zero, including any low-rank adapter contribution.

Image tensors flow through layers in channels-last (N,H,W,C) layout; the
Model front door converts from the external (N,C,H,W) contract once per
batch. Conv kernels keep their (O,C,kh,kw) shape and are flattened to the
channels-last column order on the fly.
"""

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, StateError
from .tensor import fold_nhwc, unfold_nhwc

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
LN_EPS = 1e-5


class Param:
    """A weight tensor plus its gradient accumulator.

    `trainable` gates gradient accumulation and optimizer updates.
    `mask` (same shape, bool) marks kept weights after structured pruning;
    `mask_axis` records which axis the pruned structures live on.
    """

    __slots__ = ("value", "grad", "trainable", "mask", "mask_axis")

    def __init__(self, value, trainable=True):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.mask = None
        self.mask_axis = None

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def kept_count(self):
        """Element count excluding masked-out (pruned) positions."""
        if self.mask is None:
            return self.value.size
        return int(self.mask.sum())

    def alive_out(self):
        """Boolean liveness per output row, or None when no row structure is masked."""
        if self.mask is None or self.mask_axis != 0:
            return None
        return self.mask.reshape(self.mask.shape[0], -1).any(axis=1)


def _project(x2, wflat, p, adapter):
    """y2 = x2 @ wflat.T plus the (masked) low-rank adapter term.

    wflat is p's weight in its (d_out, d_in) matrix view. Output rows whose
    base structure is pruned stay exactly zero: the adapter term is blanked
    on them so a dead channel cannot leak signal through the adapter path.
    Returns (y2, u) where u = x2 @ A.T is cached for the backward pass.
    """
    y2 = x2 @ wflat.T
    u = None
    if adapter is not None:
        u = x2 @ adapter.a.value.T
        term = (u @ adapter.b.value.T) * adapter.scale
        alive = p.alive_out()
        if alive is not None and not alive.all():
            term[:, ~alive] = 0.0
        y2 = y2 + term
    return y2, u


def _project_backward(g2, x2, wflat, p, adapter, u, fold=None):
    """Accumulate weight/adapter gradients for _project; return grad wrt x2.

    `fold` maps the flat (d_out, d_in) weight gradient back to the
    parameter's stored shape (identity for weights stored flat).
    """
    if adapter is not None:
        ga = g2
        alive = p.alive_out()
        if alive is not None and not alive.all():
            ga = g2.copy()
            ga[:, ~alive] = 0.0
        gu = (ga @ adapter.b.value) * adapter.scale
        if adapter.b.trainable:
            adapter.b.grad += (ga.T @ u) * adapter.scale
        if adapter.a.trainable:
            adapter.a.grad += gu.T @ x2
        gx = g2 @ wflat + gu @ adapter.a.value
    else:
        gx = g2 @ wflat
    if p.trainable:
        gw = g2.T @ x2
        p.grad += fold(gw) if fold is not None else gw.reshape(p.value.shape)
    return gx


def kaiming_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base layer: named params, optional adapters, one-shot backward cache."""

    kind = "Layer"

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.adapters = {}
        self.cache = None
        self.role = None

    def sublayers(self):
        return ()

    def named_params(self, prefix=""):
        base = prefix + self.name
        for pname, p in self.params.items():
            yield f"{base}.{pname}", p
        for sub in self.sublayers():
            yield from sub.named_params(base + ".")

    def named_layers(self, prefix=""):
        base = prefix + self.name
        yield base, self
        for sub in self.sublayers():
            yield from sub.named_layers(base + ".")

    def fold_flat(self, pname, mat):
        """Reshape a (d_out, d_in) matrix into the stored parameter layout."""
        return mat.reshape(self.params[pname].value.shape)

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, gout):
        if self.cache is None:
            raise StateError(f"{self.kind} '{self.name}': backward called without a train-mode forward")
        cache, self.cache = self.cache, None
        return self._backward(np.asarray(gout), cache)

    def _backward(self, gout, cache):
        raise NotImplementedError


class Linear(Layer):
    kind = "Linear"

    def __init__(self, name, d_in, d_out, rng, dtype=np.float32, init="kaiming"):
        super().__init__(name)
        self.d_in = d_in
        self.d_out = d_out
        if init == "kaiming":
            w = kaiming_uniform(rng, (d_out, d_in), d_in, dtype)
        else:
            w = rng.normal(0.0, 0.02, size=(d_out, d_in)).astype(dtype)
        self.params = {"weight": Param(w), "bias": Param(np.zeros(d_out, dtype=dtype))}

    def forward(self, x, train=True):
        x = np.asarray(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name}: expected last dim {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.d_in)
        w = self.params["weight"]
        y2, u = _project(x2, w.value, w, self.adapters.get("weight"))
        y2 = y2 + self.params["bias"].value
        if train:
            self.cache = (x2, u, lead)
        return y2.reshape(*lead, self.d_out)

    def _backward(self, gout, cache):
        x2, u, lead = cache
        g2 = gout.reshape(-1, self.d_out)
        b = self.params["bias"]
        if b.trainable:
            b.grad += g2.sum(axis=0)
        w = self.params["weight"]
        gx = _project_backward(g2, x2, w.value, w, self.adapters.get("weight"), u)
        return gx.reshape(*lead, self.d_in)


class Conv2d(Layer):
    """3x3 (or any square) convolution over channels-last activations.

    The kernel is stored (O, C, kh, kw); the forward pass flattens it to
    the (kh, kw, C) column order the channels-last unfold produces.
    """

    kind = "Conv2d"

    def __init__(self, name, c_in, c_out, kernel=3, stride=1, padding=1, rng=None, dtype=np.float32):
        super().__init__(name)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        w = kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype)
        self.params = {"weight": Param(w), "bias": Param(np.zeros(c_out, dtype=dtype))}

    def _wflat(self):
        return np.ascontiguousarray(self.params["weight"].value.transpose(0, 2, 3, 1)).reshape(self.c_out, -1)

    def fold_flat(self, pname, mat):
        k = self.kernel
        return np.ascontiguousarray(mat.reshape(self.c_out, k, k, self.c_in).transpose(0, 3, 1, 2))

    def forward(self, x, train=True):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise DimensionError(f"{self.name}: expected (N,H,W,{self.c_in}), got {x.shape}")
        cols, oh, ow = unfold_nhwc(x, self.kernel, self.kernel, self.stride, self.padding)
        w = self.params["weight"]
        wflat = self._wflat()
        y2, u = _project(cols, wflat, w, self.adapters.get("weight"))
        y2 = y2 + self.params["bias"].value
        if train:
            self.cache = (cols, u, x.shape, wflat)
        return y2.reshape(x.shape[0], oh, ow, self.c_out)

    def _backward(self, gout, cache):
        cols, u, x_shape, wflat = cache
        g2 = gout.reshape(-1, self.c_out)
        b = self.params["bias"]
        if b.trainable:
            b.grad += g2.sum(axis=0)
        w = self.params["weight"]
        gcols = _project_backward(
            g2, cols, wflat, w, self.adapters.get("weight"), u,
            fold=lambda gw: self.fold_flat("weight", gw),
        )
        return fold_nhwc(gcols, x_shape, self.kernel, self.kernel, self.stride, self.padding)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=True):
        x = np.asarray(x)
        if train:
            self.cache = x > 0
        return np.maximum(x, 0)

    def _backward(self, gout, cache):
        return gout * cache


class GELU(Layer):
    kind = "GELU"

    def forward(self, x, train=True):
        x = np.asarray(x)
        if train:
            self.cache = x
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def _backward(self, gout, cache):
        x = cache
        local = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return gout * local


class LayerNorm(Layer):
    """Normalizes the trailing feature axis (channels, in channels-last)."""

    kind = "LayerNorm"

    def __init__(self, name, dim, dtype=np.float32):
        super().__init__(name)
        self.dim = dim
        self.params = {
            "gamma": Param(np.ones(dim, dtype=dtype)),
            "beta": Param(np.zeros(dim, dtype=dtype)),
        }

    def forward(self, x, train=True):
        x = np.asarray(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"{self.name}: feature axis {x.shape[-1]} != {self.dim}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv
        if train:
            self.cache = (xhat, inv)
        return self.params["gamma"].value * xhat + self.params["beta"].value

    def _backward(self, gout, cache):
        xhat, inv = cache
        gamma = self.params["gamma"]
        beta = self.params["beta"]
        reduce_axes = tuple(range(gout.ndim - 1))
        if gamma.trainable:
            gamma.grad += (gout * xhat).sum(axis=reduce_axes)
        if beta.trainable:
            beta.grad += gout.sum(axis=reduce_axes)
        dxhat = gout * gamma.value
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


class MultiHeadAttention(Layer):
    """Standard multi-head self-attention over (N, T, D) token batches.

    After a forward pass `attn_weights` holds the (N, heads, T, T) softmax
    matrix, mainly so tests can check that rows sum to one.
    """

    kind = "MultiHeadAttention"

    def __init__(self, name, dim, heads, rng, dtype=np.float32):
        super().__init__(name)
        if dim % heads != 0:
            raise ConfigError(f"{name}: dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.params = {}
        for pname in ("wq", "wk", "wv", "wo"):
            self.params[pname] = Param(rng.normal(0.0, 0.02, size=(dim, dim)).astype(dtype))
        for pname in ("bq", "bk", "bv", "bo"):
            self.params[pname] = Param(np.zeros(dim, dtype=dtype))
        self.attn_weights = None

    def _split(self, x2, n, t):
        return x2.reshape(n, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, train=True):
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise DimensionError(f"{self.name}: expected (N,T,{self.dim}), got {x.shape}")
        n, t, _ = x.shape
        x2 = x.reshape(-1, self.dim)
        p = self.params
        q2, uq = _project(x2, p["wq"].value, p["wq"], self.adapters.get("wq"))
        k2, uk = _project(x2, p["wk"].value, p["wk"], self.adapters.get("wk"))
        v2, uv = _project(x2, p["wv"].value, p["wv"], self.adapters.get("wv"))
        q = self._split(q2 + p["bq"].value, n, t)
        k = self._split(k2 + p["bk"].value, n, t)
        v = self._split(v2 + p["bv"].value, n, t)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(self.head_dim)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        self.attn_weights = attn
        ctx = attn @ v  # (n, heads, t, head_dim)
        ctx2 = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(-1, self.dim)
        y2, uo = _project(ctx2, p["wo"].value, p["wo"], self.adapters.get("wo"))
        y2 = y2 + p["bo"].value
        if train:
            self.cache = (x2, uq, uk, uv, q, k, v, attn, ctx2, uo, n, t)
        return y2.reshape(n, t, self.dim)

    def _backward(self, gout, cache):
        x2, uq, uk, uv, q, k, v, attn, ctx2, uo, n, t = cache
        p = self.params
        g2 = gout.reshape(-1, self.dim)
        if p["bo"].trainable:
            p["bo"].grad += g2.sum(axis=0)
        gctx2 = _project_backward(g2, ctx2, p["wo"].value, p["wo"], self.adapters.get("wo"), uo)
        gctx = self._split(gctx2, n, t)
        gattn = gctx @ v.transpose(0, 1, 3, 2)
        gv = attn.transpose(0, 1, 3, 2) @ gctx
        gscores = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
        gscores /= math.sqrt(self.head_dim)
        gq = gscores @ k
        gk = gscores.transpose(0, 1, 3, 2) @ q
        gx2 = np.zeros_like(x2)
        for gh, wname, bname, u in (
            (gq, "wq", "bq", uq),
            (gk, "wk", "bk", uk),
            (gv, "wv", "bv", uv),
        ):
            gh2 = np.ascontiguousarray(gh.transpose(0, 2, 1, 3)).reshape(-1, self.dim)
            bias = p[bname]
            if bias.trainable:
                bias.grad += gh2.sum(axis=0)
            gx2 += _project_backward(gh2, x2, p[wname].value, p[wname], self.adapters.get(wname), u)
        return gx2.reshape(n, t, self.dim)


class PatchEmbed(Layer):
    """Splits a channels-last image into non-overlapping patches, projects
    them to tokens, and adds a learned positional embedding."""

    kind = "PatchEmbed"

    def __init__(self, name, in_channels, image_size, patch, dim, rng, dtype=np.float32):
        super().__init__(name)
        if image_size % patch != 0:
            raise ConfigError(f"{name}: image side {image_size} not divisible by patch {patch}")
        self.in_channels = in_channels
        self.image_size = image_size
        self.patch = patch
        self.dim = dim
        self.grid = image_size // patch
        self.tokens = self.grid * self.grid
        self.patch_dim = in_channels * patch * patch
        self.params = {
            "weight": Param(kaiming_uniform(rng, (dim, self.patch_dim), self.patch_dim, dtype)),
            "bias": Param(np.zeros(dim, dtype=dtype)),
            "pos": Param(rng.normal(0.0, 0.02, size=(self.tokens, dim)).astype(dtype)),
        }

    def forward(self, x, train=True):
        x = np.asarray(x)
        expected = (self.image_size, self.image_size, self.in_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"{self.name}: expected (N,{expected[0]},{expected[1]},{expected[2]}), got {x.shape}")
        n = x.shape[0]
        g, pt = self.grid, self.patch
        patches = x.reshape(n, g, pt, g, pt, self.in_channels).transpose(0, 1, 3, 2, 4, 5)
        patches2 = np.ascontiguousarray(patches).reshape(-1, self.patch_dim)
        w = self.params["weight"]
        y2, u = _project(patches2, w.value, w, self.adapters.get("weight"))
        y2 = y2 + self.params["bias"].value
        y = y2.reshape(n, self.tokens, self.dim) + self.params["pos"].value
        if train:
            self.cache = (patches2, u, n)
        return y

    def _backward(self, gout, cache):
        patches2, u, n = cache
        pos = self.params["pos"]
        if pos.trainable:
            pos.grad += gout.sum(axis=0)
        g2 = gout.reshape(-1, self.dim)
        bias = self.params["bias"]
        if bias.trainable:
            bias.grad += g2.sum(axis=0)
        w = self.params["weight"]
        gpatch = _project_backward(g2, patches2, w.value, w, self.adapters.get("weight"), u)
        g, pt = self.grid, self.patch
        gpatch = gpatch.reshape(n, g, g, pt, pt, self.in_channels).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(gpatch).reshape(n, self.image_size, self.image_size, self.in_channels)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, train=True):
        x = np.asarray(x)
        if train:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def _backward(self, gout, cache):
        return gout.reshape(cache)


class MeanPool(Layer):
    """Global mean over spatial axes (N,H,W,C)->(N,C) or tokens (N,T,D)->(N,D)."""

    kind = "MeanPool"

    def forward(self, x, train=True):
        x = np.asarray(x)
        if x.ndim == 4:
            if train:
                self.cache = x.shape
            return x.mean(axis=(1, 2))
        if x.ndim == 3:
            if train:
                self.cache = x.shape
            return x.mean(axis=1)
        raise DimensionError(f"{self.name}: expected 3-D or 4-D input, got {x.shape}")

    def _backward(self, gout, cache):
        if len(cache) == 4:
            n, h, w, c = cache
            return np.broadcast_to(gout[:, None, None, :], cache) / (h * w)
        n, t, d = cache
        return np.broadcast_to(gout[:, None, :], cache) / t


class ResidualBlock(Layer):
    """y = body(x) + skip(x); skip defaults to identity."""

    kind = "ResidualBlock"

    def __init__(self, name, body, skip=None):
        super().__init__(name)
        self.body = list(body)
        self.skip = skip

    def sublayers(self):
        if self.skip is not None:
            return (*self.body, self.skip)
        return tuple(self.body)

    def forward(self, x, train=True):
        y = x
        for layer in self.body:
            y = layer.forward(y, train)
        s = self.skip.forward(x, train) if self.skip is not None else x
        if train:
            self.cache = True
        return y + s

    def _backward(self, gout, cache):
        gskip = self.skip.backward(gout) if self.skip is not None else gout
        g = gout
        for layer in reversed(self.body):
            g = layer.backward(g)
        return g + gskip
