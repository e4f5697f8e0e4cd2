"""Question-grounded visual interaction via stacked bilinear attention glimpses.

Per glimpse the attention logits are a low-rank bilinear form
``w . ((H_i U_h) * (V_j U_v))`` normalized jointly over all (word, object)
pairs, and the glimpse vector ``W_o^T sum_ij A_ij (H_i P_h) * (V_j P_v)`` is
broadcast-added to every row of the question-shaped state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .layers import uniform_fan_in


@dataclass
class CrossModalState:
    H: ad.Tensor                                   # (..., L, d)
    maps: list = field(default_factory=list)       # g tensors (..., L, K)
    glimpses: list = field(default_factory=list)   # g tensors (..., d)
    history: list = field(default_factory=list)    # H_0 .. H_g


def init_glimpse(store, prefix, rng, d: int) -> None:
    for name in ("u_h", "u_v", "p_h", "p_v", "w_o"):
        store.add(f"{prefix}/{name}", uniform_fan_in(rng, d, (d, d)))
    store.add(f"{prefix}/w", uniform_fan_in(rng, d, (d,)))


def init_interaction(store, prefix, rng, d: int, g: int) -> None:
    for i in range(g):
        init_glimpse(store, f"{prefix}/glimpse{i}", rng, d)


def _check(H, V):
    if H.shape[-1] != V.shape[-1] or H.shape[:-2] != V.shape[:-2]:
        raise ValueError(f"question state {H.shape} and objects {V.shape} disagree")


def bilinear_attention_map(H, V, p):
    H, V = ad.as_tensor(H), ad.as_tensor(V)
    _check(H, V)
    L, K = H.shape[-2], V.shape[-2]
    logits = ((H @ p["u_h"]) * p["w"]) @ ad.swap_last(V @ p["u_v"])
    lead = logits.shape[:-2]
    flat = ad.softmax(ad.reshape(logits, lead + (L * K,)), axis=-1)
    return ad.reshape(flat, lead + (L, K))


def ban_glimpse(H, V, A, p):
    """Joint d-vector ``W_o^T sum_ij A_ij (H_i P_h) * (V_j P_v)``."""
    H, V, A = ad.as_tensor(H), ad.as_tensor(V), ad.as_tensor(A)
    _check(H, V)
    pooled = ad.sum((H @ p["p_h"]) * (A @ (V @ p["p_v"])), axis=-2)
    d = pooled.shape[-1]
    row = ad.reshape(pooled, pooled.shape[:-1] + (1, d)) @ p["w_o"]
    return ad.reshape(row, pooled.shape)


def vq_interact(F_q, V, g: int, p) -> CrossModalState:
    if g < 0:
        raise ValueError("glimpse count must be >= 0")
    H = ad.as_tensor(F_q)
    state = CrossModalState(H=H, history=[H])
    for i in range(g):
        gp = p.scope(f"glimpse{i}")
        A = bilinear_attention_map(H, V, gp)
        j = ban_glimpse(H, V, A, gp)
        H = H + ad.reshape(j, j.shape[:-1] + (1, j.shape[-1]))
        state.maps.append(A)
        state.glimpses.append(j)
        state.history.append(H)
    state.H = H
    return state
