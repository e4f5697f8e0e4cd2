import math

import numpy as np
import pytest

from masn import autodiff as ad
from masn.encoders import (encode_location, encode_question, encode_stream, fuse_global,
                           init_question_encoder, init_stream_encoder, positional_encoding)

from oracles import relu, vecmat

D, D_IN = 8, 5


def stream_params(seed=11, prefix="enc"):
    store = ad.ParamStore()
    init_stream_encoder(store, prefix, np.random.default_rng(seed), D_IN, D)
    return store, store.scope(prefix)


def question_params(seed=0, vocab=10, embed=6, d=D):
    store = ad.ParamStore()
    init_question_encoder(store, "q", np.random.default_rng(seed), vocab, embed, d)
    return store, store.scope("q")


def ffn_oracle(x, p, prefix):
    h = relu(vecmat(x, p[f"{prefix}/l1/w"].data) + p[f"{prefix}/l1/b"].data)
    return vecmat(h, p[f"{prefix}/l2/w"].data) + p[f"{prefix}/l2/b"].data


def test_positional_encoding_examples():
    pe0 = positional_encoding(0, 8)
    np.testing.assert_array_equal(pe0, [0, 1, 0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(positional_encoding(3, 8), positional_encoding(3, 8))
    assert np.linalg.norm(positional_encoding(1, 8) - pe0) > 0
    assert np.all(np.abs(positional_encoding(123, 16)) <= 1)
    with pytest.raises(ValueError):
        positional_encoding(0, 7)
    with pytest.raises(ValueError):
        positional_encoding(-1, 8)


def test_positional_encoding_formula():
    d = 6
    for t in range(5):
        pe = positional_encoding(t, d)
        for k in range(d // 2):
            angle = t / 10000 ** (2 * k / d)
            assert pe[2 * k] == pytest.approx(math.sin(angle), abs=1e-15)
            assert pe[2 * k + 1] == pytest.approx(math.cos(angle), abs=1e-15)


def test_encode_location_oracle():
    _, p = stream_params(11)
    obj = np.zeros((1, D_IN))
    box = np.array([[0.0, 0.0, 1.0, 1.0]])
    out = encode_location(obj, box, np.array([0]), p).data
    box_emb = ffn_oracle(box[0], p, "box_ffn")
    expect = ffn_oracle(np.concatenate([obj[0], box_emb, positional_encoding(0, D)]), p, "local_ffn")
    np.testing.assert_allclose(out[0], expect, rtol=0, atol=1e-12)


def test_encode_location_rowwise():
    _, p = stream_params(2)
    rng = np.random.default_rng(0)
    obj, box = rng.standard_normal((4, D_IN)), rng.uniform(size=(4, 4))
    obj[1], box[1] = obj[0], box[0]
    frames = np.array([0, 0, 1, 1])
    out = encode_location(obj, box, frames, p).data
    np.testing.assert_array_equal(out[0], out[1])
    perm = np.array([3, 1, 0, 2])
    permuted = encode_location(obj[perm], box[perm], frames[perm], p).data
    np.testing.assert_allclose(permuted, out[perm], atol=1e-14)
    with pytest.raises(ValueError):
        encode_location(obj, box[:3], frames, p)


def test_fuse_global_oracle_and_sharing():
    _, p = stream_params(5)
    rng = np.random.default_rng(5)
    v_local, v_global = rng.standard_normal((3, D)), rng.standard_normal((2, D_IN))
    frames = np.array([1, 0, 1])
    out = fuse_global(v_local, v_global, frames, p).data
    for k in range(3):
        g = vecmat(v_global[frames[k]], p["global_proj/w"].data) + p["global_proj/b"].data
        g = g + positional_encoding(int(frames[k]), D)
        expect = ffn_oracle(np.concatenate([v_local[k], g]), p, "fuse_ffn")
        np.testing.assert_allclose(out[k], expect, rtol=0, atol=1e-12)
    # objects sharing a frame see the same global component
    same = fuse_global(np.repeat(v_local[:1], 3, axis=0), v_global, frames, p).data
    np.testing.assert_array_equal(same[0], same[2])
    assert fuse_global(v_local[:1], v_global[:1], np.array([0]), p).shape == (1, D)
    with pytest.raises(IndexError):
        fuse_global(v_local, v_global, np.array([0, 2, 1]), p)


def test_fuse_global_permutation_equivariance():
    _, p = stream_params(6)
    rng = np.random.default_rng(6)
    v_local, v_global = rng.standard_normal((4, D)), rng.standard_normal((2, D_IN))
    frames = np.array([0, 0, 1, 1])
    perm = rng.permutation(4)
    base = fuse_global(v_local, v_global, frames, p).data
    moved = fuse_global(v_local[perm], v_global, frames[perm], p).data
    np.testing.assert_allclose(moved, base[perm], atol=1e-12)


def test_swapping_streams_swaps_outputs():
    store = ad.ParamStore()
    rng = np.random.default_rng(1)
    init_stream_encoder(store, "appearance", rng, D_IN, D)
    init_stream_encoder(store, "motion", rng, D_IN, D)
    swapped = ad.ParamStore()
    for path in store.paths():
        stream, rest = path.split("/", 1)
        other = "motion" if stream == "appearance" else "appearance"
        swapped.add(f"{other}/{rest}", store[path].data)
    x = np.random.default_rng(2)
    o_a, o_m = x.standard_normal((4, D_IN)), x.standard_normal((4, D_IN))
    boxes, frames = x.uniform(size=(4, 4)), np.array([0, 0, 1, 1])
    g_a, g_m = x.standard_normal((2, D_IN)), x.standard_normal((2, D_IN))
    a = encode_stream(o_a, boxes, frames, g_a, store.scope("appearance")).data
    m = encode_stream(o_m, boxes, frames, g_m, store.scope("motion")).data
    a2 = encode_stream(o_m, boxes, frames, g_m, swapped.scope("appearance")).data
    m2 = encode_stream(o_a, boxes, frames, g_a, swapped.scope("motion")).data
    np.testing.assert_array_equal(a2, m)
    np.testing.assert_array_equal(m2, a)


def lstm_oracle(xs, p):
    n = p["w_h"].shape[0]
    h, c = np.zeros(n), np.zeros(n)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    out = []
    for x in xs:
        z = vecmat(x, p["w_x"].data) + vecmat(h, p["w_h"].data) + p["b"].data
        i, f, g, o = sig(z[:n]), sig(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sig(z[3 * n:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def test_question_encoder_matches_cell_unrolling():
    _, p = question_params(3)
    tokens = np.array([4, 1, 7])
    enc = encode_question(tokens, p)
    x = p["embed"].data[tokens]
    fwd = lstm_oracle(x, p.scope("lstm_fwd"))
    bwd = lstm_oracle(x[::-1], p.scope("lstm_bwd"))[::-1]
    for t in range(3):
        np.testing.assert_allclose(enc.forward_states[t].data, fwd[t], atol=1e-10)
        np.testing.assert_allclose(enc.backward_states[t].data, bwd[t], atol=1e-10)
        word = np.concatenate([fwd[t], bwd[t]])
        expect = vecmat(word, p["word_proj/w"].data) + p["word_proj/b"].data
        np.testing.assert_allclose(enc.F_q.data[t], expect, atol=1e-10)
    ctx = np.concatenate([fwd[-1], bwd[0]])
    np.testing.assert_allclose(enc.q.data, vecmat(ctx, p["ctx_proj/w"].data) + p["ctx_proj/b"].data,
                               atol=1e-10)


def test_question_reversal_swaps_directions():
    store, p = question_params(4)
    # tie both directions to the same cell so reversal is a pure relabeling
    for name in ("w_x", "w_h", "b"):
        store[f"q/lstm_bwd/{name}"].data[...] = store[f"q/lstm_fwd/{name}"].data
    tokens = np.array([2, 9, 5, 1])
    enc = encode_question(tokens, p)
    rev = encode_question(tokens[::-1], p)
    for t in range(4):
        np.testing.assert_allclose(rev.forward_states[t].data,
                                   enc.backward_states[3 - t].data, atol=1e-14)


def test_question_edge_cases():
    _, p = question_params(0)
    enc = encode_question(np.array([3]), p)
    assert enc.F_q.shape == (1, D) and enc.q.shape == (D,)
    with pytest.raises(ValueError):
        encode_question(np.array([], dtype=np.int64), p)
    with pytest.raises(ValueError):
        init_question_encoder(ad.ParamStore(), "q", np.random.default_rng(0), 5, 4, 7)
    batched = encode_question(np.array([[3, 1], [2, 2]]), p)
    assert batched.F_q.shape == (2, 2, D)


def test_encoder_gradients():
    store = ad.ParamStore()
    rng = np.random.default_rng(9)
    init_stream_encoder(store, "enc", rng, D_IN, D)
    init_question_encoder(store, "q", rng, 10, 6, D)
    x = np.random.default_rng(10)
    obj, boxes = x.standard_normal((4, D_IN)), x.uniform(size=(4, 4))
    frames, glob = np.array([0, 0, 1, 1]), x.standard_normal((2, D_IN))
    target = x.standard_normal((4, D))

    def loss(s):
        v = encode_stream(obj, boxes, frames, glob, s.scope("enc"))
        qe = encode_question(np.array([1, 5, 2]), s.scope("q"))
        return ad.sum(ad.square(v - target)) + ad.sum(ad.square(qe.F_q)) + ad.sum(qe.q)

    report = ad.grad_check(loss, store)
    assert report.max_error < 1e-4, report.format(1e-4)
