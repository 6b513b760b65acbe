"""Comparison encoders: causal softmax attention, GRU, and L2-normalised linear attention.

All three map ``[.., L, d_model] -> [.., L, d_model]`` and are causal: the
output at position ``t`` depends only on inputs at positions ``<= t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .numerics import ops
from .numerics.rng import make_rng, xavier_normal_init
from .numerics.tensor import Tensor, parameter, record


# ---------------------------------------------------------------- parameters

@dataclass
class AttentionLayer:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor
    w2: Tensor

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class AttentionParams:
    pos_emb: Tensor  # [L_max, d_model], row i is the embedding of "i steps before the last"
    layers: list[AttentionLayer]
    heads: int = 1

    def __post_init__(self):
        d = self.d_model
        if d % self.heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={self.heads}")
        for layer in self.layers:
            for name in ("wq", "wk", "wv", "wo"):
                if getattr(layer, name).shape != (d, d):
                    raise ShapeError(f"{name}: expected {(d, d)}, got {getattr(layer, name).shape}")

    @property
    def d_model(self) -> int:
        return self.pos_emb.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {"pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.named().items()})
        return out


def init_attention_params(d_model: int, max_len: int, layers: int = 2, heads: int = 1,
                          d_ff: int | None = None, rng=0, dtype=np.float64) -> AttentionParams:
    rng = make_rng(rng)
    d_ff = d_model if d_ff is None else d_ff

    def xav(i, o, name):
        return parameter(xavier_normal_init(i, o, rng, dtype), name)

    stack = []
    for _ in range(layers):
        stack.append(AttentionLayer(
            ln1_gamma=parameter(np.ones(d_model, dtype=dtype)),
            ln1_beta=parameter(np.zeros(d_model, dtype=dtype)),
            wq=xav(d_model, d_model, "wq"),
            wk=xav(d_model, d_model, "wk"),
            wv=xav(d_model, d_model, "wv"),
            wo=xav(d_model, d_model, "wo"),
            ln2_gamma=parameter(np.ones(d_model, dtype=dtype)),
            ln2_beta=parameter(np.zeros(d_model, dtype=dtype)),
            w1=xav(d_model, d_ff, "w1"),
            w2=xav(d_ff, d_model, "w2"),
        ))
    pos = parameter(xavier_normal_init(max_len, d_model, rng, dtype), "pos_emb")
    return AttentionParams(pos_emb=pos, layers=stack, heads=heads)


@dataclass
class GruParams:
    w_in: Tensor  # [d, 3d], gate order: update, reset, candidate
    w_rec: Tensor  # [d, 3d]
    bias: Tensor | None = field(default=None)  # [3d]

    def __post_init__(self):
        d = self.w_in.shape[0]
        if self.w_in.shape != (d, 3 * d) or self.w_rec.shape != (d, 3 * d):
            raise ShapeError(f"GruParams: w_in {self.w_in.shape}, w_rec {self.w_rec.shape}")
        if self.bias is not None and self.bias.shape != (3 * d,):
            raise ShapeError(f"GruParams: bias {self.bias.shape}")

    @property
    def d_model(self) -> int:
        return self.w_in.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {"w_in": self.w_in, "w_rec": self.w_rec}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def init_gru_params(d_model: int, bias: bool = False, rng=0, dtype=np.float64) -> GruParams:
    rng = make_rng(rng)
    w_in = np.concatenate([xavier_normal_init(d_model, d_model, rng, dtype) for _ in range(3)], axis=1)
    w_rec = np.concatenate([xavier_normal_init(d_model, d_model, rng, dtype) for _ in range(3)], axis=1)
    return GruParams(
        w_in=parameter(w_in, "w_in"),
        w_rec=parameter(w_rec, "w_rec"),
        bias=parameter(np.zeros(3 * d_model, dtype=dtype), "bias") if bias else None,
    )


# ---------------------------------------------------------------- softmax attention

def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    return ops.swapaxes(ops.reshape(x, (*lead, L, heads, d // heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    return ops.reshape(ops.swapaxes(x, -2, -3), (*lead, L, H * dh))


def causal_mask(L: int, pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Boolean [.., L, L] of allowed (query, key) pairs.

    Keys in the future are blocked; padding keys are blocked too, except a
    position always sees itself so no row is empty.
    """
    allowed = np.tril(np.ones((L, L), dtype=bool))
    if pad_mask is None:
        return allowed
    real = np.asarray(pad_mask, dtype=bool)
    return allowed & (real[..., None, :] | np.eye(L, dtype=bool))


def _add_positions(u: Tensor, params: AttentionParams) -> Tensor:
    L = u.shape[-2]
    if L > params.max_len:
        raise CapacityError(f"sequence length {L} exceeds positional capacity {params.max_len}")
    pos = ops.embedding(params.pos_emb, np.arange(L)[::-1])
    return ops.add(u, pos)


def attention_weights(h: Tensor, layer: AttentionLayer, heads: int,
                      pad_mask: np.ndarray | None = None) -> Tensor:
    """Softmax attention probabilities [.., H, L, L] for already-normalised input ``h``."""
    L, d = h.shape[-2:]
    q = _split_heads(ops.matmul(h, layer.wq), heads)
    k = _split_heads(ops.matmul(h, layer.wk), heads)
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // heads))
    allowed = causal_mask(L, pad_mask)
    if allowed.ndim == 3:
        allowed = allowed[:, None]
    return ops.softmax(ops.where(allowed, scores, -np.inf), axis=-1)


def _feed_forward(x: Tensor, layer: AttentionLayer) -> Tensor:
    h = ops.layer_norm(x, layer.ln2_gamma, layer.ln2_beta)
    return ops.add(x, ops.matmul(ops.gelu(ops.matmul(h, layer.w1)), layer.w2))


def attention_block_forward(u: Tensor, params: AttentionParams,
                            pad_mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm causal multi-head self-attention stack with position-wise FFN.

    ``pad_mask`` (True = real item, shape ``[.., L]``) removes padding keys.
    """
    x = _add_positions(u, params)
    for layer in params.layers:
        h = ops.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
        p = attention_weights(h, layer, params.heads, pad_mask)
        v = _split_heads(ops.matmul(h, layer.wv), params.heads)
        o = ops.matmul(_merge_heads(ops.matmul(p, v)), layer.wo)
        x = _feed_forward(ops.add(x, o), layer)
    return x


# ---------------------------------------------------------------- linear attention

def causal_linear_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = 1e-8,
                            chunk: int = 128) -> Tensor:
    """``out_t = (q_t S_t) / max(q_t . z_t, eps)`` with running sums
    ``S_t = sum_{j<=t} k_j v_j^T`` and ``z_t = sum_{j<=t} k_j``.

    Evaluated chunk-wise: an exact masked product inside each chunk plus the
    carried prefix state, so cost is linear in ``L``. ``q``, ``k`` are
    [.., L, dk]; ``v`` is [.., L, dv].
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"causal_linear_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    lead = q.shape[:-2]
    L, dk = q.shape[-2:]
    dv = v.shape[-1]
    qd = q.data.reshape(-1, L, dk)
    kd = k.data.reshape(-1, L, dk)
    vd = v.data.reshape(-1, L, dv)
    G = qd.shape[0]
    dtype = np.result_type(qd, kd, vd)
    bounds = [(t0, min(L, t0 + chunk)) for t0 in range(0, L, chunk)]

    S = np.zeros((G, dk, dv), dtype=dtype)
    z = np.zeros((G, dk), dtype=dtype)
    S_starts = np.empty((len(bounds), G, dk, dv), dtype=dtype)
    z_starts = np.empty((len(bounds), G, dk), dtype=dtype)
    num = np.empty((G, L, dv), dtype=dtype)
    den = np.empty((G, L), dtype=dtype)
    for i, (t0, t1) in enumerate(bounds):
        S_starts[i] = S
        z_starts[i] = z
        M = np.tril(np.ones((t1 - t0, t1 - t0), dtype=dtype))
        qc, kc, vc = qd[:, t0:t1], kd[:, t0:t1], vd[:, t0:t1]
        Aq = np.matmul(qc, np.swapaxes(kc, 1, 2)) * M
        num[:, t0:t1] = np.matmul(Aq, vc) + np.matmul(qc, S)
        den[:, t0:t1] = Aq.sum(axis=-1) + np.matmul(qc, z[..., None])[..., 0]
        S = S + np.matmul(np.swapaxes(kc, 1, 2), vc)
        z = z + kc.sum(axis=1)
    clamped = np.maximum(den, eps)
    out = Tensor((num / clamped[..., None]).reshape(*lead, L, dv))
    saved = (Tensor(S_starts), Tensor(z_starts), Tensor(den))

    def backward(g):
        g = g.reshape(G, L, dv)
        o = out.data.reshape(G, L, dv)
        gnum = g / clamped[..., None]
        gden = np.where(den > eps, -(g * o).sum(axis=-1) / clamped, 0.0)
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.empty_like(vd)
        R = np.zeros((G, dk, dv), dtype=dtype)
        r = np.zeros((G, dk), dtype=dtype)
        for i in reversed(range(len(bounds))):
            t0, t1 = bounds[i]
            M = np.tril(np.ones((t1 - t0, t1 - t0), dtype=dtype))
            qc, kc, vc = qd[:, t0:t1], kd[:, t0:t1], vd[:, t0:t1]
            gn, gd = gnum[:, t0:t1], gden[:, t0:t1]
            Gm = (np.matmul(gn, np.swapaxes(vc, 1, 2)) + gd[..., None]) * M
            Aq = np.matmul(qc, np.swapaxes(kc, 1, 2)) * M
            S0, z0 = saved[0].data[i], saved[1].data[i]
            gq[:, t0:t1] = (np.matmul(Gm, kc) + np.matmul(gn, np.swapaxes(S0, 1, 2))
                            + gd[..., None] * z0[:, None, :])
            gk[:, t0:t1] = np.matmul(np.swapaxes(Gm, 1, 2), qc) + np.matmul(vc, np.swapaxes(R, 1, 2)) + r[:, None, :]
            gv[:, t0:t1] = np.matmul(np.swapaxes(Aq, 1, 2), gn) + np.matmul(kc, R)
            R = R + np.matmul(np.swapaxes(qc, 1, 2), gn)
            r = r + (gd[..., None] * qc).sum(axis=1)
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    return record(out, (q, k, v), backward)


def linear_attention_forward(u: Tensor, params: AttentionParams,
                             pad_mask: np.ndarray | None = None, eps: float = 1e-8) -> Tensor:
    """Same layer layout as :func:`attention_block_forward`, with row-wise
    L2-normalised queries/keys in place of the softmax.

    The similarity kernel is ``1 + q_hat . k_hat`` (first-order expansion of
    ``exp(q_hat . k_hat)``), realised by prepending a constant feature to
    ``q_hat`` and ``k_hat``. It is non-negative, so the normaliser
    ``sum_j (1 + q_hat . k_hat_j)`` cannot change sign. Padding keys and values
    are zeroed (constant feature included) so they never enter the sums.
    """
    x = _add_positions(u, params)
    H = params.heads
    *lead, L, _ = x.shape
    ones = Tensor(np.ones((*lead, H, L, 1), dtype=x.dtype))
    keep = None
    key_const = ones
    if pad_mask is not None:
        keep = np.broadcast_to(np.asarray(pad_mask, dtype=x.dtype)[..., None, :, None], ones.shape)
        key_const = Tensor(np.array(keep))
    for layer in params.layers:
        h = ops.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
        q = ops.l2_normalize(_split_heads(ops.matmul(h, layer.wq), H), eps=eps)
        k = ops.l2_normalize(_split_heads(ops.matmul(h, layer.wk), H), eps=eps)
        v = _split_heads(ops.matmul(h, layer.wv), H)
        if keep is not None:
            k = ops.mul(k, keep)
            v = ops.mul(v, keep)
        q = ops.concat([ones, q], axis=-1)
        k = ops.concat([key_const, k], axis=-1)
        o = ops.matmul(_merge_heads(causal_linear_attention(q, k, v, eps=eps)), layer.wo)
        x = _feed_forward(ops.add(x, o), layer)
    return x


# ---------------------------------------------------------------- GRU

def gru_sequence(xp: Tensor, w_rec: Tensor) -> Tensor:
    """GRU recurrence over precomputed input projections.

    ``xp`` is [.., L, 3d] (update, reset, candidate), ``w_rec`` is [d, 3d].
    ``z = s(xz + h Uz)``, ``r = s(xr + h Ur)``, ``c = tanh(xc + (r*h) Uc)``,
    ``h' = (1 - z) h + z c``, starting from ``h = 0``. Backward is explicit
    backpropagation through time.
    """
    d = w_rec.shape[0]
    if w_rec.shape != (d, 3 * d) or xp.shape[-1] != 3 * d:
        raise ShapeError(f"gru_sequence: xp {xp.shape}, w_rec {w_rec.shape}")
    lead = xp.shape[:-2]
    L = xp.shape[-2]
    x = xp.data.reshape(-1, L, 3 * d)
    U = w_rec.data
    G = x.shape[0]
    dtype = np.result_type(x, U)
    H = np.empty((G, L, d), dtype=dtype)
    Z = np.empty((G, L, d), dtype=dtype)
    Rg = np.empty((G, L, d), dtype=dtype)
    C = np.empty((G, L, d), dtype=dtype)
    h = np.zeros((G, d), dtype=dtype)
    for t in range(L):
        zr = ops._sigmoid(x[:, t, :2 * d] + h @ U[:, :2 * d])
        z, r = zr[:, :d], zr[:, d:]
        c = np.tanh(x[:, t, 2 * d:] + (r * h) @ U[:, 2 * d:])
        h = (1.0 - z) * h + z * c
        H[:, t], Z[:, t], Rg[:, t], C[:, t] = h, z, r, c
    out = Tensor(H.reshape(*lead, L, d))
    saved = (Tensor(Z), Tensor(Rg), Tensor(C))

    def backward(g):
        g = g.reshape(G, L, d)
        Zs, Rs, Cs = (s.data for s in saved)
        gx = np.empty_like(x)
        gU = np.zeros_like(U)
        gh = np.zeros((G, d), dtype=dtype)
        for t in reversed(range(L)):
            gh = gh + g[:, t]
            hp = H[:, t - 1] if t > 0 else np.zeros((G, d), dtype=dtype)
            z, r, c = Zs[:, t], Rs[:, t], Cs[:, t]
            a_c = gh * z * (1.0 - c * c)
            a_z = gh * (c - hp) * z * (1.0 - z)
            g_rh = a_c @ U[:, 2 * d:].T
            a_r = g_rh * hp * r * (1.0 - r)
            gx[:, t, :d] = a_z
            gx[:, t, d:2 * d] = a_r
            gx[:, t, 2 * d:] = a_c
            gU[:, :d] += hp.T @ a_z
            gU[:, d:2 * d] += hp.T @ a_r
            gU[:, 2 * d:] += (r * hp).T @ a_c
            gh = gh * (1.0 - z) + g_rh * r + a_z @ U[:, :d].T + a_r @ U[:, d:2 * d].T
        return gx.reshape(xp.shape), gU

    return record(out, (xp, w_rec), backward)


def gru_forward(u: Tensor, params: GruParams) -> Tensor:
    xp = ops.matmul(u, params.w_in)
    if params.bias is not None:
        xp = ops.add(xp, params.bias)
    return gru_sequence(xp, params.w_rec)
