"""Layer primitives: dense, activations, softmax, attention, transformer
blocks, (bi)LSTM and 1-D convolutions, all built on the autodiff tape.

Parameters live in a :class:`~agentnest.numerics.store.ParameterStore`; the
dataclasses here only hold references.  Attention score work is tallied in a
module-level counter so hierarchical-vs-flat operation counts can be compared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# running tally of attention score entries (heads * queries * keys) computed
_ATTENTION_SCORE_OPS = 0


def reset_attention_op_count():
    global _ATTENTION_SCORE_OPS
    _ATTENTION_SCORE_OPS = 0


def attention_op_count():
    return _ATTENTION_SCORE_OPS


# -- initializers ---------------------------------------------------------------


def xavier_uniform(shape, rng):
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def normal_init(shape, rng, std=0.02):
    return rng.normal(0.0, std, size=shape)


# -- dense / activations ----------------------------------------------------------


def dense(x, w, b=None):
    """y = x @ w + b with shape checks on the contracted dimension."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: x has {x.shape[-1]} features, w expects {w.shape[0]}")
    y = T.matmul(x, w)
    if b is not None:
        if b.shape[-1] != w.shape[-1]:
            raise ValueError(f"dense: bias size {b.shape[-1]} != output size {w.shape[-1]}")
        y = y + b
    return y


_SQRT1_2 = 1.0 / np.sqrt(2.0)


def gelu(x):
    return x * (T.erf(x * Tensor(_SQRT1_2)) + 1.0) * 0.5


_ACTIVATIONS = {
    "tanh": T.tanh,
    "gelu": gelu,
    "sigmoid": T.sigmoid,
}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}, expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def softmax(x, axis=-1):
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = T.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - T.log(T.exp(shifted).sum(axis=axis, keepdims=True))


# -- attention --------------------------------------------------------------------

_MASK_FILL = -1e30


def scaled_dot_attention(q, k, v, key_mask=None):
    """softmax(q kᵀ / √d) v with padded keys receiving exactly zero weight.

    ``key_mask`` is a boolean array broadcastable to the key axis; True marks
    a real key.  A query whose keys are all masked is an error.
    """
    global _ATTENTION_SCORE_OPS
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"attention: query dim {d} != key dim {k.shape[-1]}")
    m, n = q.shape[-2], k.shape[-2]
    batch = int(np.prod(q.data.shape[:-2], dtype=np.int64)) if q.ndim > 2 else 1
    _ATTENTION_SCORE_OPS += batch * m * n

    logits = T.matmul(q, T.swapaxes(k, -1, -2)) * Tensor(1.0 / np.sqrt(d))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any(axis=-1).all():
            raise ValueError("attention: some query has all keys masked")
        blocked = np.broadcast_to(~key_mask, logits.shape)
        logits = T.where_mask(logits, blocked, _MASK_FILL)
    return T.matmul(softmax(logits, axis=-1), v)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    n_heads: int

    @classmethod
    def create(cls, store, prefix, dim, n_heads, rng):
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        mk = lambda name: store.param(f"{prefix}/{name}", xavier_uniform((dim, dim), rng))
        bz = lambda name: store.param(f"{prefix}/{name}", np.zeros(dim))
        return cls(mk("wq"), mk("wk"), mk("wv"), mk("wo"),
                   bz("bq"), bz("bk"), bz("bv"), bz("bo"), n_heads)


def _split_heads(x, n_heads):
    *lead, s, d = x.shape
    x = x.reshape(tuple(lead) + (s, n_heads, d // n_heads))
    return T.swapaxes(x, -2, -3)  # [..., H, S, dh]


def _merge_heads(x):
    x = T.swapaxes(x, -2, -3)
    *lead, s, h, dh = x.shape
    return x.reshape(tuple(lead) + (s, h * dh))


def multi_head_attention(p, x_q, x_kv, key_mask=None, causal=False):
    global _ATTENTION_SCORE_OPS
    q = _split_heads(dense(x_q, p.wq, p.bq), p.n_heads)
    k = _split_heads(dense(x_kv, p.wk, p.bk), p.n_heads)
    v = _split_heads(dense(x_kv, p.wv, p.bv), p.n_heads)

    m, n = q.shape[-2], k.shape[-2]
    batch = int(np.prod(q.data.shape[:-2], dtype=np.int64))
    _ATTENTION_SCORE_OPS += batch * m * n

    dh = q.shape[-1]
    logits = T.matmul(q, T.swapaxes(k, -1, -2)) * Tensor(1.0 / np.sqrt(dh))
    blocked = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        blocked = ~key_mask.reshape(key_mask.shape[:-1] + (1, 1, key_mask.shape[-1]))
        blocked = np.broadcast_to(blocked, logits.shape)
    if causal:
        tri = np.triu(np.ones((m, n), dtype=bool), k=1)
        blocked = tri if blocked is None else (blocked | tri)
    if blocked is not None:
        if (~blocked).sum(axis=-1).min() == 0:
            raise ValueError("attention: some query has all keys masked")
        logits = T.where_mask(logits, blocked, _MASK_FILL)
    out = T.matmul(softmax(logits, axis=-1), v)
    return dense(_merge_heads(out), p.wo, p.bo)


# -- layer norm -------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, store, prefix, dim):
        return cls(store.param(f"{prefix}/gamma", np.ones(dim)),
                   store.param(f"{prefix}/beta", np.zeros(dim)))


_LN_EPS = 1e-5


def layer_norm(x, p):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + _LN_EPS) * p.gamma + p.beta


# -- transformer blocks -------------------------------------------------------------


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store, prefix, dim, hidden, rng):
        return cls(store.param(f"{prefix}/w1", xavier_uniform((dim, hidden), rng)),
                   store.param(f"{prefix}/b1", np.zeros(hidden)),
                   store.param(f"{prefix}/w2", xavier_uniform((hidden, dim), rng)),
                   store.param(f"{prefix}/b2", np.zeros(dim)))


def feed_forward(x, p):
    return dense(gelu(dense(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class EncoderBlockParams:
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ff: LayerNormParams
    ff: FeedForwardParams
    ln_out: LayerNormParams

    @classmethod
    def create(cls, store, prefix, dim, n_heads, ff_mult, rng):
        return cls(
            LayerNormParams.create(store, f"{prefix}/ln_attn", dim),
            AttentionParams.create(store, f"{prefix}/attn", dim, n_heads, rng),
            LayerNormParams.create(store, f"{prefix}/ln_ff", dim),
            FeedForwardParams.create(store, f"{prefix}/ff", dim, dim * ff_mult, rng),
            LayerNormParams.create(store, f"{prefix}/ln_out", dim),
        )


def encoder_block(x, p, key_mask=None):
    """Pre-norm self-attention block ending in a layer norm."""
    h = x + multi_head_attention(p.attn, layer_norm(x, p.ln_attn), layer_norm(x, p.ln_attn),
                                 key_mask=key_mask)
    h = h + feed_forward(layer_norm(h, p.ln_ff), p.ff)
    return layer_norm(h, p.ln_out)


@dataclass
class DecoderBlockParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    ln_cross: LayerNormParams
    cross_attn: AttentionParams
    ln_ff: LayerNormParams
    ff: FeedForwardParams
    ln_out: LayerNormParams

    @classmethod
    def create(cls, store, prefix, dim, n_heads, ff_mult, rng):
        return cls(
            LayerNormParams.create(store, f"{prefix}/ln_self", dim),
            AttentionParams.create(store, f"{prefix}/self_attn", dim, n_heads, rng),
            LayerNormParams.create(store, f"{prefix}/ln_cross", dim),
            AttentionParams.create(store, f"{prefix}/cross_attn", dim, n_heads, rng),
            LayerNormParams.create(store, f"{prefix}/ln_ff", dim),
            FeedForwardParams.create(store, f"{prefix}/ff", dim, dim * ff_mult, rng),
            LayerNormParams.create(store, f"{prefix}/ln_out", dim),
        )


def decoder_block(x, p, memory, mem_mask=None):
    """Pre-norm causal self-attention + cross-attention block."""
    n = layer_norm(x, p.ln_self)
    h = x + multi_head_attention(p.self_attn, n, n, causal=True)
    h = h + multi_head_attention(p.cross_attn, layer_norm(h, p.ln_cross), memory,
                                 key_mask=mem_mask)
    h = h + feed_forward(layer_norm(h, p.ln_ff), p.ff)
    return layer_norm(h, p.ln_out)


# -- LSTM ---------------------------------------------------------------------------


@dataclass
class LSTMParams:
    w: Tensor  # [d_in, 4h], gate order i, f, g, o
    u: Tensor  # [h, 4h]
    b: Tensor  # [4h]

    @classmethod
    def create(cls, store, prefix, d_in, hidden, rng):
        return cls(store.param(f"{prefix}/w", xavier_uniform((d_in, 4 * hidden), rng)),
                   store.param(f"{prefix}/u", xavier_uniform((hidden, 4 * hidden), rng)),
                   store.param(f"{prefix}/b", np.zeros(4 * hidden)))

    @property
    def hidden(self):
        return self.u.shape[0]


def lstm_run(x, p, mask=None, h0=None, c0=None, reverse=False):
    """Run an LSTM over the second-to-last axis of ``x``.

    ``mask`` (same leading shape as x, one column per step) freezes the state
    at padded steps so the final state equals the state at the last real step.
    Returns (states [..., S, h], final [..., h]).
    """
    hid = p.hidden
    steps = x.shape[-2]
    xw = T.matmul(x, p.w)  # [..., S, 4h]
    h = h0 if h0 is not None else Tensor(np.zeros((1, hid)))
    c = c0 if c0 is not None else Tensor(np.zeros((1, hid)))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    states = [None] * steps
    for t in order:
        z = xw[..., t, :] + T.matmul(h, p.u) + p.b
        i = T.sigmoid(z[..., 0 * hid:1 * hid])
        f = T.sigmoid(z[..., 1 * hid:2 * hid])
        g = T.tanh(z[..., 2 * hid:3 * hid])
        o = T.sigmoid(z[..., 3 * hid:4 * hid])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if mask is not None:
            m = Tensor(mask[..., t:t + 1].astype(np.float64))
            c = c_new * m + c * (1.0 - m)
            h = h_new * m + h * (1.0 - m)
        else:
            c, h = c_new, h_new
        states[t] = h
    return T.stack(states, axis=-2), h


@dataclass
class BiLSTMParams:
    fwd: LSTMParams
    bwd: LSTMParams

    @classmethod
    def create(cls, store, prefix, d_in, hidden, rng):
        return cls(LSTMParams.create(store, f"{prefix}/fwd", d_in, hidden, rng),
                   LSTMParams.create(store, f"{prefix}/bwd", d_in, hidden, rng))


def bilstm(x, p, mask=None, init=None):
    """Bidirectional LSTM; states are concatenated per step and the final
    vector is [forward state after the last real step, backward state after
    step 1]."""
    if x.shape[-2] < 1:
        raise ValueError("bilstm: empty sequence")
    if init is None:
        hf0 = cf0 = hb0 = cb0 = None
    else:
        hf0, cf0, hb0, cb0 = init
    sf, ff = lstm_run(x, p.fwd, mask=mask, h0=hf0, c0=cf0, reverse=False)
    sb, fb = lstm_run(x, p.bwd, mask=mask, h0=hb0, c0=cb0, reverse=True)
    states = T.concat([sf, sb], axis=-1)
    # broadcast default-zero finals up to the batch shape before concat
    if ff.shape[:-1] != fb.shape[:-1]:
        target = np.broadcast_shapes(ff.shape[:-1], fb.shape[:-1])
        ff = ff + Tensor(np.zeros(target + (1,)))
        fb = fb + Tensor(np.zeros(target + (1,)))
    final = T.concat([ff, fb], axis=-1)
    return states, final


# -- convolutions -------------------------------------------------------------------


def conv1d(x, w, b=None):
    """Valid 1-D convolution over the second-to-last axis.

    x: [..., S, D], w: [width, D, C] -> [..., S - width + 1, C].
    """
    width = w.shape[0]
    s = x.shape[-2]
    if s < width:
        raise ValueError(f"conv1d: sequence length {s} shorter than kernel {width}")
    out = None
    for j in range(width):
        piece = T.matmul(x[..., j:s - width + 1 + j, :], w[j])
        out = piece if out is None else out + piece
    if b is not None:
        out = out + b
    return out


def conv1d_unigram(x, filters):
    """Width-1 convolution: a per-position linear map (dense with no bias)."""
    return T.matmul(x, filters)
