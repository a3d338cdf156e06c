"""Minimal neural-network stack on numpy arrays.

Hot convolution/pooling kernels have two interchangeable implementations:
numba-jitted loops and pure-numpy im2col. Selection is via the
``UWGEN_BACKEND`` environment variable (see :mod:`uwgen.nn.backend`).
"""

from uwgen.nn import backend
from uwgen.nn.layers import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    GlobalSkipTanh,
    InstanceNorm2d,
    LeakyReLU,
    MaxPool2d,
    Module,
    ReLU,
    Residual,
    Sequential,
    Tanh,
    UpsampleNearest,
    tree_allclose,
    tree_flatten,
    tree_map,
    tree_unflatten,
    tree_zeros_like,
)
from uwgen.nn.optim import Adam

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "Dropout",
    "Flatten",
    "GlobalSkipTanh",
    "InstanceNorm2d",
    "LeakyReLU",
    "MaxPool2d",
    "Module",
    "ReLU",
    "Residual",
    "Sequential",
    "Tanh",
    "UpsampleNearest",
    "backend",
    "tree_allclose",
    "tree_flatten",
    "tree_map",
    "tree_unflatten",
    "tree_zeros_like",
]
