"""Functional layers over the kernel backend.

Modules are stateless architecture descriptions; parameters live in nested
dicts of numpy arrays ("trees"). ``forward`` returns ``(y, cache)`` and
``backward`` consumes the cache, so one parameter set can run several
forward passes inside a single objective (needed by cycle-consistency
chains). Gradients mirror the parameter tree structure.
"""

import numpy as np

from uwgen.errors import ValidationError
from uwgen.nn import backend


# ---------------------------------------------------------------------------
# parameter-tree utilities


def tree_map(fn, tree, *rest):
    """Apply ``fn`` leaf-wise over parallel nested dicts."""
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], *(r[k] for r in rest)) for k in tree}
    return fn(tree, *rest)


def tree_flatten(tree, prefix="", sep="/"):
    """Nested dict -> flat ``{path: array}`` dict (depth-first, key order)."""
    flat = {}
    for k, v in tree.items():
        path = f"{prefix}{sep}{k}" if prefix else k
        if isinstance(v, dict):
            flat.update(tree_flatten(v, path, sep))
        else:
            flat[path] = v
    return flat


def tree_unflatten(flat, sep="/"):
    tree = {}
    for path, v in flat.items():
        parts = path.split(sep)
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return tree


def tree_zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def tree_add(a, b):
    return tree_map(np.add, a, b)


def tree_allclose(a, b, rtol=1e-7, atol=0.0):
    fa, fb = tree_flatten(a), tree_flatten(b)
    if fa.keys() != fb.keys():
        return False
    return all(np.allclose(fa[k], fb[k], rtol=rtol, atol=atol) for k in fa)


def param_count(tree):
    return int(sum(v.size for v in tree_flatten(tree).values()))


# ---------------------------------------------------------------------------
# modules


class Module:
    """Base module. Subclasses implement init_params/forward/backward."""

    def init_params(self, rng, dtype=np.float32):
        return {}

    def forward(self, params, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, params, cache, dy):
        raise NotImplementedError

    def __call__(self, params, x, train=False, rng=None):
        return self.forward(params, x, train=train, rng=rng)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, pad=0, init_std=0.02):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad = stride, pad
        self.init_std = init_std

    def init_params(self, rng, dtype=np.float32):
        w = rng.standard_normal((self.c_out, self.c_in, self.k, self.k))
        return {
            "w": (w * self.init_std).astype(dtype),
            "b": np.zeros(self.c_out, dtype=dtype),
        }

    def forward(self, params, x, train=False, rng=None):
        if x.shape[1] != self.c_in:
            raise ValidationError(
                f"conv expects {self.c_in} input channels, got {x.shape[1]}"
            )
        y = backend.kernels().conv2d_forward(
            x, params["w"], params["b"], self.stride, self.pad
        )
        return y, x

    def backward(self, params, cache, dy):
        x = cache
        bk = backend.kernels()
        dx = bk.conv2d_backward_input(dy, params["w"], x.shape, self.stride, self.pad)
        dw, db = bk.conv2d_backward_weights(
            dy, x, params["w"].shape, self.stride, self.pad
        )
        return dx, {"w": dw, "b": db}


class Dense(Module):
    """Fully connected layer; fan-in scaled uniform weight init."""

    def __init__(self, f_in, f_out):
        self.f_in, self.f_out = f_in, f_out

    def init_params(self, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(self.f_in)
        w = rng.uniform(-bound, bound, (self.f_in, self.f_out))
        return {"w": w.astype(dtype), "b": np.zeros(self.f_out, dtype=dtype)}

    def forward(self, params, x, train=False, rng=None):
        return x @ params["w"] + params["b"], x

    def backward(self, params, cache, dy):
        x = cache
        return dy @ params["w"].T, {"w": x.T @ dy, "b": dy.sum(axis=0)}


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization over spatial dims, affine."""

    def __init__(self, c, eps=1e-5):
        self.c, self.eps = c, eps

    def init_params(self, rng, dtype=np.float32):
        return {"gamma": np.ones(self.c, dtype=dtype), "beta": np.zeros(self.c, dtype=dtype)}

    def forward(self, params, x, train=False, rng=None):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mu) * inv
        y = params["gamma"][None, :, None, None] * xhat + params["beta"][None, :, None, None]
        return y, (xhat, inv)

    def backward(self, params, cache, dy):
        xhat, inv = cache
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat = dy * params["gamma"][None, :, None, None]
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, {"gamma": dgamma, "beta": dbeta}


class ReLU(Module):
    def forward(self, params, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy):
        return dy * cache, {}


class LeakyReLU(Module):
    def __init__(self, alpha=0.2):
        self.alpha = alpha

    def forward(self, params, x, train=False, rng=None):
        mask = x > 0
        a = np.asarray(self.alpha, dtype=x.dtype)
        return np.where(mask, x, a * x), mask

    def backward(self, params, cache, dy):
        a = np.asarray(self.alpha, dtype=dy.dtype)
        return np.where(cache, dy, a * dy), {}


class Tanh(Module):
    def forward(self, params, x, train=False, rng=None):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dy):
        return dy * (1.0 - cache * cache), {}


class MaxPool2d(Module):
    def __init__(self, k=2):
        self.k = k

    def forward(self, params, x, train=False, rng=None):
        y, arg = backend.kernels().maxpool2d_forward(x, self.k)
        return y, (arg, x.shape)

    def backward(self, params, cache, dy):
        arg, x_shape = cache
        return backend.kernels().maxpool2d_backward(dy, arg, x_shape, self.k), {}


class UpsampleNearest(Module):
    def __init__(self, f=2):
        self.f = f

    def forward(self, params, x, train=False, rng=None):
        return backend.kernels().upsample_nearest_forward(x, self.f), None

    def backward(self, params, cache, dy):
        return backend.kernels().upsample_nearest_backward(dy, self.f), {}


class Flatten(Module):
    def forward(self, params, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy):
        return dy.reshape(cache), {}


class Dropout(Module):
    """Inverted dropout; active only when train=True (then rng is required)."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, params, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValidationError("dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        return x * keep * scale, keep * scale

    def backward(self, params, cache, dy):
        if cache is None:
            return dy, {}
        return dy * cache, {}


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)
        self.keys = [f"{i:02d}_{type(l).__name__.lower()}" for i, l in enumerate(self.layers)]

    def init_params(self, rng, dtype=np.float32):
        params = {}
        for key, layer in zip(self.keys, self.layers):
            p = layer.init_params(rng, dtype)
            if p:
                params[key] = p
        return params

    def forward(self, params, x, train=False, rng=None):
        caches = []
        for key, layer in zip(self.keys, self.layers):
            x, cache = layer.forward(params.get(key, {}), x, train=train, rng=rng)
            caches.append(cache)
        return x, caches

    def backward(self, params, cache, dy):
        grads = {}
        for key, layer, c in zip(self.keys[::-1], self.layers[::-1], cache[::-1]):
            dy, g = layer.backward(params.get(key, {}), c, dy)
            if g:
                grads[key] = g
        return dy, grads


class Residual(Module):
    """y = x + body(x); body must preserve shape."""

    def __init__(self, body):
        self.body = body

    def init_params(self, rng, dtype=np.float32):
        return self.body.init_params(rng, dtype)

    def forward(self, params, x, train=False, rng=None):
        y, cache = self.body.forward(params, x, train=train, rng=rng)
        return x + y, cache

    def backward(self, params, cache, dy):
        dx_body, grads = self.body.backward(params, cache, dy)
        return dy + dx_body, grads


class GlobalSkipTanh(Module):
    """y = tanh(x + body(x)).

    The long input-to-output skip keeps a freshly initialized body close to
    the identity map, which stabilizes early cycle-reconstruction training.
    """

    def __init__(self, body):
        self.body = body

    def init_params(self, rng, dtype=np.float32):
        return self.body.init_params(rng, dtype)

    def forward(self, params, x, train=False, rng=None):
        b, cache = self.body.forward(params, x, train=train, rng=rng)
        y = np.tanh(x + b)
        return y, (cache, y)

    def backward(self, params, cache, dy):
        body_cache, y = cache
        dpre = dy * (1.0 - y * y)
        dx_body, grads = self.body.backward(params, body_cache, dpre)
        return dpre + dx_body, grads
