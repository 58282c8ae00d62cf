"""Transformer building blocks shared by the text encoder, SD encoder and decoder.

Parameters live in flat ``dict[str, Tensor]`` mappings keyed by dotted names
(``"layer0.attn.q.w"``).  Each ``init_*`` helper adds its entries to such a
dict; each forward helper reads them back by prefix.
"""

import numpy as np

from . import tensor as T

NEG_INF = -1e9


def init_linear(rng, params, name, d_in, d_out, bias=True):
    params[f"{name}.w"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)))
    if bias:
        params[f"{name}.b"] = T.parameter(np.zeros(d_out))


def init_layer_norm(params, name, d):
    params[f"{name}.g"] = T.parameter(np.ones(d))
    params[f"{name}.b"] = T.parameter(np.zeros(d))


def init_attention(rng, params, name, d_model):
    for proj in ("q", "k", "v", "o"):
        init_linear(rng, params, f"{name}.{proj}", d_model, d_model)


def init_ffn(rng, params, name, d_model, d_ff):
    init_linear(rng, params, f"{name}.fc1", d_model, d_ff)
    init_linear(rng, params, f"{name}.fc2", d_ff, d_model)


def init_encoder_layer(rng, params, name, d_model, d_ff):
    init_layer_norm(params, f"{name}.ln1", d_model)
    init_attention(rng, params, f"{name}.attn", d_model)
    init_layer_norm(params, f"{name}.ln2", d_model)
    init_ffn(rng, params, f"{name}.ffn", d_model, d_ff)


def init_decoder_layer(rng, params, name, d_model, d_ff):
    init_layer_norm(params, f"{name}.ln1", d_model)
    init_attention(rng, params, f"{name}.self", d_model)
    init_layer_norm(params, f"{name}.ln2", d_model)
    init_attention(rng, params, f"{name}.cross", d_model)
    init_layer_norm(params, f"{name}.ln3", d_model)
    init_ffn(rng, params, f"{name}.ffn", d_model, d_ff)


def linear(x, params, name):
    out = x @ params[f"{name}.w"]
    b = params.get(f"{name}.b")
    return out + b if b is not None else out


def layer_norm(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def key_bias(valid):
    """Additive attention bias from a boolean ``(batch, keys)`` validity mask."""
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def attention(x, kv, params, name, heads, bias=None):
    """Multi-head scaled dot-product attention of ``x`` (B,T,d) over ``kv`` (B,S,d)."""
    b, t, d = x.shape
    s = kv.shape[1]
    dh = d // heads

    def split(z, n):
        return z.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, params, f"{name}.q"), t)
    k = split(linear(kv, params, f"{name}.k"), s)
    v = split(linear(kv, params, f"{name}.v"), s)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    weights = T.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(ctx, params, f"{name}.o")


def ffn(x, params, name):
    return linear(T.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def _drop(x, rng, rate):
    return T.dropout(x, T.dropout_mask(rng, x.shape, rate))


def encoder_layer(x, params, name, heads, bias=None, rng=None, rate=0.0):
    """Pre-norm self-attention block."""
    h = layer_norm(x, params, f"{name}.ln1")
    x = x + _drop(attention(h, h, params, f"{name}.attn", heads, bias), rng, rate)
    h = layer_norm(x, params, f"{name}.ln2")
    return x + _drop(ffn(h, params, f"{name}.ffn"), rng, rate)


def decoder_layer(x, memory, params, name, heads, memory_bias=None, rng=None, rate=0.0):
    """Pre-norm block: query self-attention, cross-attention to ``memory``, feed-forward."""
    h = layer_norm(x, params, f"{name}.ln1")
    x = x + _drop(attention(h, h, params, f"{name}.self", heads), rng, rate)
    h = layer_norm(x, params, f"{name}.ln2")
    x = x + _drop(attention(h, memory, params, f"{name}.cross", heads, memory_bias), rng, rate)
    h = layer_norm(x, params, f"{name}.ln3")
    return x + _drop(ffn(h, params, f"{name}.ffn"), rng, rate)
