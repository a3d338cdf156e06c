import numpy as np
import pytest

from uwgen.errors import ValidationError
from uwgen.nn import backend
from uwgen.nn.layers import tree_flatten, tree_unflatten


@pytest.fixture(params=["numpy", "numba"])
def kernel_backend(request):
    """Run a test under both kernel backends (skipping ones not installed)."""
    try:
        backend.set_backend(request.param)
    except ValidationError as exc:
        pytest.skip(str(exc))
    yield request.param
    backend.set_backend(None)


def numeric_grad(f, theta, h=1e-5):
    """Central-difference gradient of scalar f at flat vector theta (float64)."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2.0 * h)
    return g


def params_to_vector(params):
    flat = tree_flatten(params)
    keys = sorted(flat)
    vec = np.concatenate([flat[k].ravel() for k in keys])
    return vec, keys


def vector_to_params(vec, keys, template):
    flat = tree_flatten(template)
    out = {}
    at = 0
    for k in keys:
        n = flat[k].size
        out[k] = vec[at : at + n].reshape(flat[k].shape).astype(flat[k].dtype)
        at += n
    return tree_unflatten(out)


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom
