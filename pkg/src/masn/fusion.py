"""Motion-appearance-centered attention and question-guided fusion.

The stacked state ``U = [H_a ; H_m]`` queries three key/value sources
(appearance rows, motion rows, all rows). The three normalized results are
mixed with weights given by their similarity to the question context, passed
through a residual feed-forward block, and pooled into one vector ``f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import autodiff as ad
from .layers import ffn, init_ffn, init_layer_norm, layer_norm, uniform_fan_in

BRANCHES = ("a", "m", "all")


@dataclass
class FusionState:
    U: ad.Tensor
    Z: dict = field(default_factory=dict)          # branch -> (..., 2L, d)
    P: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)     # branch -> attention weights
    alpha: ad.Tensor | None = None                 # (..., n_branches)
    branches: tuple = BRANCHES
    S: ad.Tensor | None = None
    O: ad.Tensor | None = None
    beta: ad.Tensor | None = None                  # (..., 2L)
    f: ad.Tensor | None = None                     # (..., d)


def init_fusion(store, prefix, rng, d: int) -> None:
    for b in BRANCHES:
        for name in ("wq", "wk", "wv"):
            store.add(f"{prefix}/attn_{b}/{name}", uniform_fan_in(rng, d, (d, d)))
        init_layer_norm(store, f"{prefix}/ln_{b}", d)
    init_ffn(store, f"{prefix}/ffn", rng, d, 4 * d, d)
    init_layer_norm(store, f"{prefix}/ln_out", d)
    init_aggregate(store, prefix, rng, d)


def init_aggregate(store, prefix, rng, d: int) -> None:
    # no bias: a shared offset cancels inside the softmax
    store.add(f"{prefix}/score/w", uniform_fan_in(rng, d, (d, 1)))


def stack_streams(H_a, H_m):
    H_a, H_m = ad.as_tensor(H_a), ad.as_tensor(H_m)
    if H_a.shape != H_m.shape:
        raise ValueError(f"stream shapes differ: {H_a.shape} vs {H_m.shape}")
    return ad.concat([H_a, H_m], axis=-2)


def attention(Q, K, V, d_k: int):
    """Scaled dot-product attention; returns (output, row-stochastic weights)."""
    weights = ad.softmax((Q @ ad.swap_last(K)) * (1.0 / math.sqrt(d_k)), axis=-1)
    return weights @ V, weights


def centered_attention(U, H_a, H_m, p, branches=BRANCHES, d_k: int | None = None):
    """Return ``{branch: (Z, P, weights)}`` for the requested branches."""
    U = ad.as_tensor(U)
    d_k = d_k or U.shape[-1]
    sources = {"a": H_a, "m": H_m, "all": U}
    out = {}
    for b in branches:
        ap = p.scope(f"attn_{b}")
        src = ad.as_tensor(sources[b])
        P, w = attention(U @ ap["wq"], src @ ap["wk"], src @ ap["wv"], d_k)
        out[b] = (layer_norm(P + U, p.scope(f"ln_{b}")), P, w)
    return out


def question_scores(Zs, q, d_z: int):
    """Scaled similarity between q and each Z summed over its rows: (..., n)."""
    q = ad.as_tensor(q)
    cols = []
    for Z in Zs:
        z = ad.sum(Z, axis=-2)
        s = ad.sum(q * z, axis=-1) * (1.0 / math.sqrt(d_z))
        cols.append(ad.reshape(s, s.shape + (1,)))
    return ad.concat(cols, axis=-1)


def mix(Zs, alpha):
    S = None
    for i, Z in enumerate(Zs):
        w = alpha[..., i]
        term = ad.reshape(w, w.shape + (1, 1)) * Z
        S = term if S is None else S + term
    return S


def question_guided_fuse(Zs, q, p, d_z: int | None = None):
    """Return ``(alpha, S, O)`` for a sequence of normalized branch matrices."""
    Zs = list(Zs)
    d_z = d_z or Zs[0].shape[-1]
    alpha = ad.softmax(question_scores(Zs, q, d_z), axis=-1)
    S = mix(Zs, alpha)
    O = layer_norm(S + ffn(S, p.scope("ffn")), p.scope("ln_out"))
    return alpha, S, O


def aggregate(O, p):
    """Attention pooling over rows; returns ``(beta, f)``."""
    O = ad.as_tensor(O)
    logits = O @ p["score/w"]
    beta = ad.softmax(ad.reshape(logits, logits.shape[:-1]), axis=-1)
    pooled = ad.reshape(beta, beta.shape[:-1] + (1, beta.shape[-1])) @ O
    return beta, ad.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


def fuse(H_a, H_m, q, p, branches=BRANCHES, d_k=None, d_z=None) -> FusionState:
    U = stack_streams(H_a, H_m)
    state = FusionState(U=U, branches=tuple(branches))
    for b, (Z, P, w) in centered_attention(U, H_a, H_m, p, branches, d_k).items():
        state.Z[b], state.P[b], state.scores[b] = Z, P, w
    state.alpha, state.S, state.O = question_guided_fuse(
        [state.Z[b] for b in branches], q, p, d_z)
    state.beta, state.f = aggregate(state.O, p)
    return state
