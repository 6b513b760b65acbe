import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmrec.baselines import (
    AttentionParams,
    GruParams,
    attention_block_forward,
    attention_weights,
    causal_linear_attention,
    causal_mask,
    gru_forward,
    init_attention_params,
    init_gru_params,
    linear_attention_forward,
)
from ssmrec.errors import CapacityError, ConfigError, ShapeError
from ssmrec.numerics import Tensor, grad_check, make_rng, parameter
from ssmrec.numerics import ops


def _gelu(x):
    # tanh form of GELU
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


# ---------------------------------------------------------------- softmax attention

def test_attention_single_token_is_value_path():
    p = init_attention_params(4, max_len=3, layers=1, rng=0)
    u = make_rng(1).normal(size=(1, 4))
    out = attention_block_forward(Tensor(u), p).data
    layer = p.layers[0]
    x = u + p.pos_emb.data[0]
    h = _layer_norm(x, layer.ln1_gamma.data, layer.ln1_beta.data)
    x = x + h @ layer.wv.data @ layer.wo.data
    h2 = _layer_norm(x, layer.ln2_gamma.data, layer.ln2_beta.data)
    expected = x + _gelu(h2 @ layer.w1.data) @ layer.w2.data
    np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-6)


def test_attention_rows_sum_to_one_over_allowed_keys():
    rng = make_rng(2)
    p = init_attention_params(8, max_len=10, layers=1, heads=2, rng=3)
    h = Tensor(rng.normal(size=(2, 6, 8)))
    pad = np.array([[0, 0, 1, 1, 1, 1], [1, 1, 1, 1, 1, 1]], dtype=bool)
    w = attention_weights(h, p.layers[0], 2, pad).data
    allowed = causal_mask(6, pad)[:, None]
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[~np.broadcast_to(allowed, w.shape)] == 0.0)
    # scores recomputed by hand, softmax over the allowed entries
    q = (h.data @ p.layers[0].wq.data).reshape(2, 6, 2, 4).transpose(0, 2, 1, 3)
    k = (h.data @ p.layers[0].wk.data).reshape(2, 6, 2, 4).transpose(0, 2, 1, 3)
    s = np.where(allowed, q @ k.transpose(0, 1, 3, 2) / 2.0, -np.inf)
    e = np.exp(s - s.max(-1, keepdims=True))
    np.testing.assert_allclose(w, e / e.sum(-1, keepdims=True), atol=1e-12)


def test_causal_mask_keeps_diagonal_for_padding():
    m = causal_mask(3, np.array([False, True, True]))
    assert m.tolist() == [[True, False, False], [False, True, False], [False, True, True]]


@pytest.mark.parametrize("forward", [attention_block_forward, linear_attention_forward])
def test_attention_kinds_are_causal(forward):
    p = init_attention_params(6, max_len=12, layers=2, heads=2, rng=4)
    u = make_rng(5).normal(size=(12, 6))
    base = forward(Tensor(u), p).data
    for t in (11, 6, 0):
        v = u.copy()
        v[t:] += make_rng(t).normal(size=v[t:].shape)
        out = forward(Tensor(v), p).data
        np.testing.assert_allclose(out[:t], base[:t], atol=1e-12, rtol=0)


def test_attention_capacity_and_head_errors():
    p = init_attention_params(4, max_len=3, rng=0)
    with pytest.raises(CapacityError):
        attention_block_forward(Tensor(np.zeros((4, 4))), p)
    with pytest.raises(ConfigError):
        init_attention_params(6, max_len=3, heads=4)
    bad = init_attention_params(4, max_len=3, layers=1, rng=0).layers[0]
    bad.wq = parameter(np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        AttentionParams(p.pos_emb, [bad])


# ---------------------------------------------------------------- GRU

def _gru_reference(u, w_in, w_rec, bias):
    d = w_rec.shape[0]
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    h = np.zeros(d)
    out = []
    for x in u:
        xp = x @ w_in + bias
        z = sig(xp[:d] + h @ w_rec[:, :d])
        r = sig(xp[d:2 * d] + h @ w_rec[:, d:2 * d])
        c = np.tanh(xp[2 * d:] + (r * h) @ w_rec[:, 2 * d:])
        h = (1 - z) * h + z * c
        out.append(h)
    return np.array(out)


def test_gru_zero_weights_stay_at_zero():
    p = GruParams(parameter(np.zeros((3, 9))), parameter(np.zeros((3, 9))), parameter(np.zeros(9)))
    out = gru_forward(Tensor(make_rng(0).normal(size=(7, 3))), p).data
    assert np.all(out == 0.0)


def test_gru_matches_hand_recurrence():
    rng = make_rng(1)
    p = init_gru_params(4, bias=True, rng=2)
    p.bias.data[:] = rng.normal(size=12)
    u = rng.normal(size=(9, 4))
    ref = _gru_reference(u, p.w_in.data, p.w_rec.data, p.bias.data)
    np.testing.assert_allclose(gru_forward(Tensor(u), p).data, ref, atol=1e-12)
    batched = gru_forward(Tensor(np.stack([u, u[::-1]])), p).data
    np.testing.assert_allclose(batched[0], ref, atol=1e-12)


def test_gru_default_has_no_bias_and_checks_shapes():
    assert init_gru_params(3).bias is None
    with pytest.raises(ShapeError):
        GruParams(parameter(np.zeros((3, 9))), parameter(np.zeros((3, 6))))


def test_gru_is_causal():
    p = init_gru_params(5, rng=3)
    u = make_rng(4).normal(size=(10, 5))
    base = gru_forward(Tensor(u), p).data
    v = u.copy()
    v[6:] = 9.0
    np.testing.assert_array_equal(gru_forward(Tensor(v), p).data[:6], base[:6])


# ---------------------------------------------------------------- linear attention

def _quadratic_linear_attention(q, k, v, eps=1e-8):
    L = q.shape[-2]
    scores = (q @ np.swapaxes(k, -1, -2)) * np.tril(np.ones((L, L)))
    return (scores @ v) / np.maximum(scores.sum(-1), eps)[..., None]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 16), st.integers(0, 10_000))
def test_chunked_linear_attention_matches_quadratic_form(L, chunk, seed):
    rng = make_rng(seed)
    q = np.abs(rng.normal(size=(2, L, 3)))
    k = np.abs(rng.normal(size=(2, L, 3)))
    v = rng.normal(size=(2, L, 4))
    out = causal_linear_attention(Tensor(q), Tensor(k), Tensor(v), chunk=chunk).data
    np.testing.assert_allclose(out, _quadratic_linear_attention(q, k, v), atol=1e-10, rtol=1e-10)


def test_linear_attention_single_step_returns_value():
    rng = make_rng(5)
    q, k, v = (Tensor(np.abs(rng.normal(size=(1, 3)))) for _ in range(3))
    np.testing.assert_allclose(causal_linear_attention(q, k, v).data, v.data, rtol=1e-12)


def test_linear_attention_query_scale_invariance():
    p = init_attention_params(6, max_len=8, layers=1, rng=6)
    u = make_rng(7).normal(size=(8, 6))
    base = linear_attention_forward(Tensor(u), p).data
    p.layers[0].wq.data *= 10.0
    np.testing.assert_allclose(linear_attention_forward(Tensor(u), p).data, base, atol=1e-12)


def test_linear_attention_ignores_padding():
    p = init_attention_params(4, max_len=6, layers=2, rng=8)
    u = make_rng(9).normal(size=(6, 4))
    pad = np.array([False, False, True, True, True, True])
    a = linear_attention_forward(Tensor(u), p, pad_mask=pad).data
    u2 = u.copy()
    u2[:2] = 5.0
    b = linear_attention_forward(Tensor(u2), p, pad_mask=pad).data
    np.testing.assert_allclose(a[2:], b[2:], atol=1e-12)


# ---------------------------------------------------------------- gradients

def _loss(out, seed):
    w = make_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def test_attention_gradients():
    p = init_attention_params(4, max_len=5, layers=2, heads=2, rng=10)
    u = parameter(make_rng(11).normal(size=(2, 5, 4)))
    pad = np.array([[0, 1, 1, 1, 1], [1, 1, 1, 1, 1]], dtype=bool)
    f = lambda: _loss(attention_block_forward(u, p, pad), 0)
    assert grad_check(f, [u] + list(p.named().values())) < 1e-5


def test_linear_attention_gradients():
    p = init_attention_params(4, max_len=5, layers=2, heads=2, rng=12)
    u = parameter(make_rng(13).normal(size=(2, 5, 4)))
    pad = np.array([[0, 0, 1, 1, 1], [1, 1, 1, 1, 1]], dtype=bool)
    f = lambda: _loss(linear_attention_forward(u, p, pad), 1)
    assert grad_check(f, [u] + list(p.named().values())) < 1e-5


def test_chunked_linear_attention_gradients():
    rng = make_rng(14)
    q, k = (parameter(np.abs(rng.normal(size=(2, 7, 3)))) for _ in range(2))
    v = parameter(rng.normal(size=(2, 7, 2)))
    f = lambda: _loss(causal_linear_attention(q, k, v, chunk=3), 2)
    assert grad_check(f, [q, k, v]) < 1e-6


def test_gru_gradients():
    p = init_gru_params(4, bias=True, rng=15)
    p.bias.data[:] = make_rng(16).normal(size=12) * 0.1
    u = parameter(make_rng(17).normal(size=(2, 6, 4)))
    f = lambda: _loss(gru_forward(u, p), 3)
    assert grad_check(f, [u] + list(p.named().values())) < 1e-5
