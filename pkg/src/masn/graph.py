"""Soft object-relation graph and the residual two-layer graph convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import RELU_GAIN, init_layer_norm, layer_norm, uniform_fan_in

ROW_SUM_TOL = 1e-8


@dataclass
class GraphState:
    X: ad.Tensor
    A: ad.Tensor
    F: ad.Tensor


def init_graph(store, prefix, rng, d: int) -> None:
    for name in ("w1", "w2"):
        store.add(f"{prefix}/{name}", uniform_fan_in(rng, d, (d, d)))
    for name in ("w3", "w4"):
        store.add(f"{prefix}/{name}", uniform_fan_in(rng, d, (d, d), RELU_GAIN))
    init_layer_norm(store, f"{prefix}/ln", d)


def build_adjacency(X, W1, W2):
    """Row-stochastic K x K adjacency: softmax over j of <X_i W1, X_j W2>."""
    X = ad.as_tensor(X)
    scores = (X @ W1) @ ad.swap_last(X @ W2)
    return ad.softmax(scores, axis=-1)


def gcn(X, A, W3, W4):
    return ad.relu(A @ ad.relu(A @ X @ W3) @ W4)


def gcn_forward(X, A, W3, W4, ln):
    """``LayerNorm(X + ReLU(A ReLU(A X W3) W4))``; rejects non-stochastic A."""
    X, A = ad.as_tensor(X), ad.as_tensor(A)
    a = A.data
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != X.shape[-2]:
        raise ValueError(f"adjacency {a.shape} does not match {X.shape[-2]} nodes")
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise ValueError("adjacency must be row-stochastic")
    return layer_norm(X + gcn(X, A, W3, W4), ln)


def object_graph(X, p) -> GraphState:
    A = build_adjacency(X, p["w1"], p["w2"])
    F = gcn_forward(X, A, p["w3"], p["w4"], p.scope("ln"))
    return GraphState(ad.as_tensor(X), A, F)
