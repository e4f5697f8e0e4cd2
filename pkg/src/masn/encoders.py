"""Object location encoding, global-local fusion and the question encoder."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import ffn, init_ffn, init_linear, linear, orthogonal, uniform_fan_in


def positional_encoding(index: int, d: int) -> np.ndarray:
    """Sinusoidal encoding; even slots are sines, odd slots cosines."""
    if d % 2:
        raise ValueError(f"positional encoding width must be even, got {d}")
    if index < 0:
        raise ValueError("index must be >= 0")
    freqs = 1.0 / 10000.0 ** (np.arange(0, d, 2) / d)
    out = np.empty(d)
    out[0::2] = np.sin(index * freqs)
    out[1::2] = np.cos(index * freqs)
    return out


@functools.lru_cache(maxsize=64)
def _cached_table(n: int, d: int) -> np.ndarray:
    table = np.stack([positional_encoding(i, d) for i in range(n)]) if n else np.zeros((0, d))
    table.setflags(write=False)
    return table


def positional_table(n: int, d: int) -> np.ndarray:
    """Rows 0..n-1 of the sinusoidal encoding (read-only, cached)."""
    return _cached_table(int(n), int(d))


# ---------------------------------------------------------------------------
# visual streams


def init_stream_encoder(store, prefix, rng, d_in: int, d: int) -> None:
    init_ffn(store, f"{prefix}/box_ffn", rng, 4, d, d)
    init_ffn(store, f"{prefix}/local_ffn", rng, d_in + 2 * d, d, d)
    init_linear(store, f"{prefix}/global_proj", rng, d_in, d)
    init_ffn(store, f"{prefix}/fuse_ffn", rng, 2 * d, d, d)


def _frame_encoding(frames, d):
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size and frames.min() < 0:
        raise ValueError("frame indices must be >= 0")
    table = positional_table(int(frames.max()) + 1 if frames.size else 0, d)
    return table[frames]


def encode_location(objects, boxes, frames, p):
    """Per-object local features: FFN([object ; FFN(box) ; frame encoding])."""
    objects, boxes = ad.as_tensor(objects), ad.as_tensor(boxes)
    frames = np.asarray(frames, dtype=np.int64)
    if objects.shape[:-1] != boxes.shape[:-1] or boxes.shape[-1] != 4:
        raise ValueError(f"objects {objects.shape} and boxes {boxes.shape} disagree")
    if frames.shape != objects.shape[:-1]:
        raise ValueError(f"frames {frames.shape} do not match objects {objects.shape}")
    d = p["box_ffn/l2/w"].shape[1]
    box_emb = ffn(boxes, p.scope("box_ffn"))
    time_emb = ad.Tensor(_frame_encoding(frames, d))
    return ffn(ad.concat([objects, box_emb, time_emb], axis=-1), p.scope("local_ffn"))


def fuse_global(v_local, v_global, frames, p):
    """Row k = FFN([v_local[k] ; proj(v_global)[frame(k)] + frame encoding])."""
    v_global = ad.as_tensor(v_global)
    frames = np.asarray(frames, dtype=np.int64)
    n_frames = v_global.shape[-2]
    if frames.size and (frames.min() < 0 or frames.max() >= n_frames):
        raise IndexError(f"frame index out of range [0, {n_frames})")
    d = p["global_proj/w"].shape[1]
    glob = linear(v_global, p.scope("global_proj")) + positional_table(n_frames, d)
    per_object = ad.gather_rows(glob, frames)
    return ffn(ad.concat([v_local, per_object], axis=-1), p.scope("fuse_ffn"))


def encode_stream(objects, boxes, frames, v_global, p):
    return fuse_global(encode_location(objects, boxes, frames, p), v_global, frames, p)


# ---------------------------------------------------------------------------
# question


@dataclass
class QuestionEncoding:
    F_q: ad.Tensor              # (..., L, d)
    q: ad.Tensor                # (..., d)
    forward_states: list        # L tensors (..., d/2), in time order
    backward_states: list       # L tensors (..., d/2), in time order


def init_lstm(store, path, rng, d_in, hidden):
    store.add(f"{path}/w_x", uniform_fan_in(rng, d_in, (d_in, 4 * hidden)))
    store.add(f"{path}/w_h", np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    store.add(f"{path}/b", b)


def init_question_encoder(store, prefix, rng, vocab: int, embed_dim: int, d: int) -> None:
    if d % 2:
        raise ValueError("model width d must be even for the bidirectional encoder")
    store.add(f"{prefix}/embed", rng.standard_normal((vocab, embed_dim)) / np.sqrt(embed_dim))
    init_lstm(store, f"{prefix}/lstm_fwd", rng, embed_dim, d // 2)
    init_lstm(store, f"{prefix}/lstm_bwd", rng, embed_dim, d // 2)
    init_linear(store, f"{prefix}/word_proj", rng, d, d)
    init_linear(store, f"{prefix}/ctx_proj", rng, d, d)


def run_lstm(x, p, reverse=False):
    """Hidden states of one direction, returned in time order."""
    steps = x.shape[-2]
    hidden = p["w_h"].shape[0]
    zeros = ad.Tensor(np.zeros(x.shape[:-2] + (hidden,)))
    h, c = zeros, zeros
    states = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        hc = ad.lstm_cell(x[..., t, :], h, c, p["w_x"], p["w_h"], p["b"])
        h, c = hc[..., :hidden], hc[..., hidden:]
        states[t] = h
    return states


def encode_question(tokens, p) -> QuestionEncoding:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 0 or tokens.shape[-1] == 0:
        raise ValueError("question must contain at least one token")
    x = ad.embedding(p["embed"], tokens)
    fwd = run_lstm(x, p.scope("lstm_fwd"))
    bwd = run_lstm(x, p.scope("lstm_bwd"), reverse=True)
    per_step = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
    words = ad.concat([ad.reshape(s, s.shape[:-1] + (1, s.shape[-1])) for s in per_step], axis=-2)
    F_q = linear(words, p.scope("word_proj"))
    q = linear(ad.concat([fwd[-1], bwd[0]], axis=-1), p.scope("ctx_proj"))
    return QuestionEncoding(F_q, q, fwd, bwd)
