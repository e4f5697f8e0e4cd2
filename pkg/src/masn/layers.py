"""Linear / feed-forward building blocks and their initializers."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

RELU_GAIN = math.sqrt(2.0)


def uniform_fan_in(rng, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_linear(store, path, rng, fan_in, fan_out, gain=1.0, bias=True):
    store.add(f"{path}/w", uniform_fan_in(rng, fan_in, (fan_in, fan_out), gain))
    if bias:
        store.add(f"{path}/b", np.zeros(fan_out))


def init_ffn(store, path, rng, d_in, d_hidden, d_out):
    init_linear(store, f"{path}/l1", rng, d_in, d_hidden, gain=RELU_GAIN)
    init_linear(store, f"{path}/l2", rng, d_hidden, d_out)


def init_layer_norm(store, path, d):
    store.add(f"{path}/gain", np.ones(d))
    store.add(f"{path}/bias", np.zeros(d))


def linear(x, p):
    """``x @ w (+ b)`` for a scope holding ``w`` and optionally ``b``."""
    if "b" in p:
        return ad.affine(x, p["w"], p["b"])
    return x @ p["w"]


def ffn(x, p):
    """One ReLU hidden layer followed by a linear output."""
    return linear(ad.relu(linear(x, p.scope("l1"))), p.scope("l2"))


def layer_norm(x, p):
    return ad.layer_norm(x, p["gain"], p["bias"])
