"""Small parameter-management helpers shared by the trainable networks.

Parameters live in flat dicts keyed by hierarchical names so checkpoints
stay order-independent and states can be merged per stage.
"""

from __future__ import annotations

import math

import numpy as np

from guidegen import autodiff as ad

__all__ = [
    "add_param",
    "add_linear",
    "linear",
    "add_conv",
    "conv",
    "add_norm",
    "layer_norm",
    "group_norm_groups",
    "attention",
]


def add_param(params: dict, name: str, array) -> ad.Parameter:
    if name in params:
        raise ValueError(f"duplicate parameter name {name!r}")
    p = ad.Parameter(name, array)
    params[name] = p
    return p


def add_linear(params, name, d_in, d_out, rng, zero=False):
    scale = 0.0 if zero else 1.0 / math.sqrt(d_in)
    add_param(params, f"{name}.w", scale * rng.standard_normal((d_in, d_out)))
    add_param(params, f"{name}.b", np.zeros(d_out))


def linear(params, name, x):
    y = ad.matmul(x, params[f"{name}.w"].value)
    return ad.add_bias(y, params[f"{name}.b"].value, axis=1)


def add_conv(params, name, c_in, c_out, k, rng, nd=3, zero=False):
    fan_in = c_in * k**nd
    scale = 0.0 if zero else math.sqrt(2.0 / fan_in)
    add_param(params, f"{name}.w", scale * rng.standard_normal((c_out, c_in) + (k,) * nd))
    add_param(params, f"{name}.b", np.zeros(c_out))


def conv(params, name, x, stride=1, nd=3):
    fn = ad.conv3d if nd == 3 else ad.conv2d
    return fn(x, params[f"{name}.w"].value, params[f"{name}.b"].value, stride=stride)


def add_norm(params, name, dim):
    add_param(params, f"{name}.g", np.ones(dim))
    add_param(params, f"{name}.b", np.zeros(dim))


def layer_norm(params, name, x):
    return ad.layer_norm(x, params[f"{name}.g"].value, params[f"{name}.b"].value)


def group_norm_groups(channels: int, cap: int = 8) -> int:
    g = min(cap, channels)
    while channels % g:
        g -= 1
    return g


def attention(params, name, queries_in, keys_in, d):
    """Single-head scaled dot-product attention; rows of the weight matrix
    over key positions sum to 1."""
    q = linear(params, f"{name}.q", queries_in)
    k = linear(params, f"{name}.k", keys_in)
    v = linear(params, f"{name}.v", keys_in)
    scores = ad.affine(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d), 0.0)
    weights = ad.softmax(scores, axis=1)
    return ad.matmul(weights, v), weights
