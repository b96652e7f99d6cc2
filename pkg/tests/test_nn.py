import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npstream import nn
from npstream import tensor as T
from npstream.tensor import Tensor

SHAPE = nn.AttentionShape(d_model=8, heads=2, d_qk=4, d_v=4)


def wrap(params):
    return {k: Tensor(v) for k, v in params.items()}


def block_params(seed, prefixes, shape=SHAPE, scramble_ln=True):
    rng = np.random.default_rng(seed)
    p = {}
    for prefix in prefixes:
        p.update(nn.init_block(rng, prefix, shape))
    if scramble_ln:
        # non-trivial gains, biases and MLP biases so no term is accidentally inert
        for k in p:
            if k.endswith((".g", ".b", ".bo")) or ".mlp.b" in k:
                p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    return p


def full_causal_encode(x, p, prefixes, shape=SHAPE):
    mask = nn.causal_mask(x.shape[-2])
    outs = []
    for prefix in prefixes:
        x = nn.residual_block(x, None, p, prefix, shape, mask)
        outs.append(x)
    return outs


# --- masks ----------------------------------------------------------------------------


def test_causal_mask_small_cases():
    assert np.array_equal(nn.build_causal_mask(1), [[0.0]])
    assert np.array_equal(nn.build_causal_mask(2), [[0.0, -np.inf], [0.0, 0.0]])
    assert np.array_equal(np.exp(nn.build_causal_mask(3)).sum(axis=1), [1.0, 2.0, 3.0])


def test_causal_mask_empty_is_an_error():
    with pytest.raises(ValueError):
        nn.build_causal_mask(0)


@given(st.integers(1, 30))
def test_causal_mask_structure(n):
    m = nn.build_causal_mask(n)
    i, j = np.indices((n, n))
    assert np.all(m[i >= j] == 0.0) and np.all(np.isneginf(m[i < j]))


def test_offset_mask_rows_see_prefix():
    m = nn.causal_mask(2, 5, offset=3)
    assert np.array_equal(np.isfinite(m), [[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]])


# --- attention ----------------------------------------------------------------------------


def test_single_key_output_ignores_query():
    p = wrap(block_params(0, ["b"]))
    rng = np.random.default_rng(1)
    key = rng.standard_normal((1, 8))
    out = nn.attention(rng.standard_normal((4, 8)), key, key, p, "b.attn", SHAPE, np.zeros((4, 1))).data
    expected = key @ p["b.attn.wv"].data @ p["b.attn.wo"].data + p["b.attn.bo"].data
    assert np.allclose(out, np.broadcast_to(expected, (4, 8)), atol=1e-14)


def test_causal_row_equals_truncated_attention():
    p = wrap(block_params(2, ["b"]))
    x = np.random.default_rng(3).standard_normal((6, 8))
    masked = nn.attention(x, x, x, p, "b.attn", SHAPE, nn.causal_mask(6)).data
    for i in range(6):
        trunc = nn.attention(x[i : i + 1], x[: i + 1], x[: i + 1], p, "b.attn", SHAPE).data
        assert np.max(np.abs(masked[i] - trunc[0])) < 1e-14


def test_identical_queries_identical_rows():
    p = wrap(block_params(4, ["b"]))
    rng = np.random.default_rng(5)
    q = np.repeat(rng.standard_normal((1, 8)), 3, axis=0)
    kv = rng.standard_normal((5, 8))
    out = nn.attention(q, kv, kv, p, "b.attn", SHAPE).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_zero_mask_equals_unmasked_bitwise():
    p = wrap(block_params(6, ["b"]))
    x = np.random.default_rng(7).standard_normal((2, 5, 8))
    a = nn.attention(x, x, x, p, "b.attn", SHAPE, np.zeros((5, 5))).data
    b = nn.attention(x, x, x, p, "b.attn", SHAPE).data
    assert np.array_equal(a, b)


def test_scale_is_inverse_sqrt_head_width():
    assert nn.AttentionShape(128, 8, 16, 16).scale == 0.25
    rng = np.random.default_rng(8)
    q, k, v = (Tensor(rng.standard_normal((2, 3, 4))) for _ in range(3))
    scaled = nn.attend(q, k, v, SHAPE.scale).data
    # unscaled oracle with the logits pre-divided by sqrt(d_qk)
    logits = q.data @ np.swapaxes(k.data, -1, -2) / np.sqrt(4)
    w = np.exp(logits - logits.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    assert np.max(np.abs(scaled - w @ v.data)) < 1e-14


def test_mask_shape_checked():
    p = wrap(block_params(9, ["b"]))
    x = np.ones((3, 8))
    with pytest.raises(T.ShapeError):
        nn.attention(x, x, x, p, "b.attn", SHAPE, np.zeros((3, 2)))


def test_fully_masked_row_raises():
    p = wrap(block_params(9, ["b"]))
    x = np.random.default_rng(0).standard_normal((2, 8))
    mask = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
    with pytest.raises(T.DegenerateRowError):
        nn.attention(x, x, x, p, "b.attn", SHAPE, mask)


def test_chunked_attention_matches_direct(monkeypatch):
    rng = np.random.default_rng(10)
    q, k, v = (Tensor(rng.standard_normal((2, 2, 37, 4))) for _ in range(3))
    k, v = Tensor(k.data[..., :29, :]), Tensor(v.data[..., :29, :])
    mask = nn.causal_mask(37, 29, offset=-8)
    mask[:8, 0] = 0.0
    direct = nn.attend(q, k, v, 0.5, mask).data
    monkeypatch.setattr(nn, "CHUNK_SCORES", 100)
    chunked = nn.attend(q, k, v, 0.5, mask).data
    assert np.max(np.abs(direct - chunked)) < 1e-14


def test_op_counter_counts_score_entries():
    c = nn.OpCounter()
    rng = np.random.default_rng(11)
    nn.attend(Tensor(rng.standard_normal((3, 2, 5, 4))), Tensor(rng.standard_normal((3, 2, 7, 4))), Tensor(rng.standard_normal((3, 2, 7, 4))), 0.5, counter=c)
    assert c.score_ops == 3 * 2 * 5 * 7 and c.calls == 1


# --- residual block ------------------------------------------------------------------------


def test_zero_weight_block_is_identity():
    p = {k: np.zeros_like(v) for k, v in block_params(12, ["b"], scramble_ln=False).items()}
    x = np.random.default_rng(13).standard_normal((2, 4, 8))
    assert np.array_equal(nn.residual_block(x, None, wrap(p), "b", SHAPE).data, x)


def test_block_hand_unroll_single_token():
    p = block_params(14, ["b"])
    x = np.random.default_rng(15).standard_normal((1, 8))

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * g + b

    h = ln(x, p["b.ln1.g"], p["b.ln1.b"])
    # one key: softmax weight is 1, so attention returns the projected value
    z = x + h @ p["b.attn.wv"] @ p["b.attn.wo"] + p["b.attn.bo"]
    h2 = ln(z, p["b.ln2.g"], p["b.ln2.b"])
    hidden = np.maximum(h2 @ p["b.mlp.w0"] + p["b.mlp.b0"], 0.0)
    expected = z + hidden @ p["b.mlp.w1"] + p["b.mlp.b1"]
    out = nn.residual_block(x, None, wrap(p), "b", SHAPE).data
    assert np.max(np.abs(out - expected)) < 1e-13


def test_cross_block_gradcheck():
    p = block_params(16, ["b"])
    rng = np.random.default_rng(17)
    xq, xkv = rng.standard_normal((3, 8)), rng.standard_normal((4, 8))
    f = lambda q: T.tsum(T.square(nn.residual_block(q["xq"], q["xkv"], q, "b", SHAPE)))
    theta = dict(p, xq=xq, xkv=xkv)
    assert T.finite_diff_check(f, theta, max_coords=250, rng=rng) < 1e-4


def test_cached_block_equals_block():
    p = wrap(block_params(18, ["b"]))
    rng = np.random.default_rng(19)
    xq, xkv = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 5, 8))
    k, v = nn.cached_kv(xkv, p, "b", SHAPE.heads)
    a = nn.residual_block(xq, xkv, p, "b", SHAPE).data
    b = nn.residual_block_cached(xq, k, v, p, "b", SHAPE).data
    assert np.max(np.abs(a - b)) < 1e-14


# --- MLP ---------------------------------------------------------------------------------------


def test_mlp_zero_weights_give_last_bias():
    p = nn.init_mlp(np.random.default_rng(0), "m", [3, 5, 5, 2])
    p = {k: np.zeros_like(v) for k, v in p.items()}
    p["m.b2"] = np.array([1.5, -2.0])
    out = nn.mlp_forward(np.random.default_rng(1).standard_normal((4, 3)), wrap(p), "m", 3).data
    assert np.array_equal(out, np.broadcast_to([1.5, -2.0], (4, 2)))


def test_mlp_toy_one_one_one():
    p = {f"m.w{i}": np.ones((1, 1)) for i in range(3)}
    p.update({"m.b0": np.array([-1.0]), "m.b1": np.array([0.5]), "m.b2": np.array([2.0])})
    out = nn.mlp_forward(np.array([[3.0], [0.2]]), wrap(p), "m", 3).data
    # 3 -> relu(2)=2 -> relu(2.5)=2.5 -> 4.5 ; 0.2 -> relu(-0.8)=0 -> 0.5 -> 2.5
    assert np.array_equal(out, [[4.5], [2.5]])


def test_mlp_gradcheck():
    rng = np.random.default_rng(2)
    p = nn.init_mlp(rng, "m", [3, 6, 6, 2])
    p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
    x = rng.standard_normal((5, 3))
    f = lambda q: T.tsum(T.square(nn.mlp_forward(x, q, "m", 3)))
    assert T.finite_diff_check(f, p) < 1e-4


def test_glorot_bounds():
    w = nn.glorot(np.random.default_rng(0), 30, 20)
    bound = np.sqrt(6 / 50)
    assert np.all(np.abs(w) <= bound) and np.abs(w).max() > 0.9 * bound


# --- KV cache ----------------------------------------------------------------------------------


PREFIXES = ["l0", "l1", "l2"]


def _tokens(seed, n, batch=2):
    return np.random.default_rng(seed).standard_normal((batch, n, 8))


def test_cold_start_equals_full_encode():
    p = wrap(block_params(20, PREFIXES))
    x = _tokens(21, 7)
    cache = nn.KVCache(3)
    outs = nn.kv_extend(cache, x, p, PREFIXES, SHAPE)
    full = full_causal_encode(x, p, PREFIXES)
    assert cache.n_cached == 7
    assert max(np.max(np.abs(a.data - b.data)) for a, b in zip(outs, full)) < 1e-12


def test_extend_by_one_matches_last_row():
    p = wrap(block_params(22, PREFIXES))
    x = _tokens(23, 9)
    cache = nn.KVCache(3)
    nn.kv_extend(cache, x[:, :8], p, PREFIXES, SHAPE)
    out = nn.kv_extend(cache, x[:, 8:], p, PREFIXES, SHAPE)[-1].data
    full = full_causal_encode(x, p, PREFIXES)[-1].data
    assert np.max(np.abs(out[:, 0] - full[:, 8])) < 1e-10


def test_two_single_extends_equal_one_double():
    p = wrap(block_params(24, PREFIXES))
    x = _tokens(25, 6)
    a, b = nn.KVCache(3), nn.KVCache(3)
    nn.kv_extend(a, x[:, :4], p, PREFIXES, SHAPE)
    nn.kv_extend(b, x[:, :4], p, PREFIXES, SHAPE)
    o1 = nn.kv_extend(a, x[:, 4:5], p, PREFIXES, SHAPE)[-1].data
    o2 = nn.kv_extend(a, x[:, 5:6], p, PREFIXES, SHAPE)[-1].data
    both = nn.kv_extend(b, x[:, 4:6], p, PREFIXES, SHAPE)[-1].data
    assert np.max(np.abs(np.concatenate([o1, o2], axis=1) - both)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 24))
def test_random_chunking_equivalence(seed, n):
    rng = np.random.default_rng(seed)
    p = wrap(block_params(seed, PREFIXES))
    x = rng.standard_normal((1, n, 8))
    cuts = np.sort(rng.choice(np.arange(1, n), size=rng.integers(0, n), replace=False)) if n > 1 else []
    cache = nn.KVCache(3)
    outs = [nn.kv_extend(cache, c, p, PREFIXES, SHAPE)[-1].data for c in np.split(x, cuts, axis=1)]
    full = full_causal_encode(x, p, PREFIXES)[-1].data
    assert np.max(np.abs(np.concatenate(outs, axis=1) - full)) < 1e-10


def test_float32_chunked_equivalence():
    p32 = {k: Tensor(v.astype(np.float32)) for k, v in block_params(26, PREFIXES).items()}
    x = _tokens(27, 12).astype(np.float32)
    cache = nn.KVCache(3)
    outs = [nn.kv_extend(cache, x[:, i : i + 3], p32, PREFIXES, SHAPE)[-1].data for i in range(0, 12, 3)]
    full = full_causal_encode(x, p32, PREFIXES)[-1].data
    assert outs[0].dtype == np.float32
    assert np.max(np.abs(np.concatenate(outs, axis=1) - full)) < 1e-4


def test_cache_is_append_only():
    p = wrap(block_params(28, PREFIXES))
    x = _tokens(29, 10)
    cache = nn.KVCache(3)
    nn.kv_extend(cache, x[:, :3], p, PREFIXES, SHAPE)
    before = cache.snapshot()
    for i in range(3, 10):
        nn.kv_extend(cache, x[:, i : i + 1], p, PREFIXES, SHAPE)
        for layer, snap in enumerate(before):
            k, v = cache.get(layer, "self")
            assert k[..., :3, :].tobytes() == snap["self"][0]
            assert v[..., :3, :].tobytes() == snap["self"][1]
    assert cache.n_cached == 10


def test_causality_exact_zero_sensitivity():
    p = wrap(block_params(30, PREFIXES))
    x = _tokens(31, 8)
    y = x.copy()
    y[:, 5] += 1.0
    a = full_causal_encode(x, p, PREFIXES)[-1].data
    b = full_causal_encode(y, p, PREFIXES)[-1].data
    assert np.array_equal(a[:, :5], b[:, :5]) and not np.array_equal(a[:, 5:], b[:, 5:])


def test_extend_errors():
    p = wrap(block_params(32, PREFIXES))
    with pytest.raises(ValueError):
        nn.kv_extend(nn.KVCache(2), _tokens(0, 2), p, PREFIXES, SHAPE)
    with pytest.raises(T.ShapeError):
        nn.kv_extend(nn.KVCache(3), np.ones((1, 2, 6)), p, PREFIXES, SHAPE)


def test_cache_soft_cap():
    p = wrap(block_params(33, PREFIXES))
    cache = nn.KVCache(3)
    cache.max_tokens = 4
    nn.kv_extend(cache, _tokens(0, 4), p, PREFIXES, SHAPE)
    with pytest.raises(MemoryError):
        nn.kv_extend(cache, _tokens(1, 1), p, PREFIXES, SHAPE)


def test_cache_copy_is_independent():
    p = wrap(block_params(34, PREFIXES))
    cache = nn.KVCache(3)
    nn.kv_extend(cache, _tokens(0, 3), p, PREFIXES, SHAPE)
    snap = cache.snapshot()
    fork = cache.copy()
    nn.kv_extend(fork, _tokens(1, 5), p, PREFIXES, SHAPE)
    assert cache.snapshot() == snap and cache.n_cached == 3 and fork.n_cached == 8
