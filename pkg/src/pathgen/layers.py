"""Network building blocks on top of :mod:`pathgen.autodiff`.

Parameters are plain ``dict[str, np.ndarray]`` keyed by dotted names; forward
functions receive the same keys mapped to :class:`~pathgen.autodiff.Tensor`.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

NEG_INF = -1e9


class ParamBuilder:
    """Accumulates named, deterministically initialised parameter arrays."""

    def __init__(self, rng, prefix=""):
        self.rng = rng
        self.params: dict[str, np.ndarray] = {}
        self.prefix = prefix

    def scope(self, name):
        child = ParamBuilder(self.rng, f"{self.prefix}{name}.")
        child.params = self.params
        return child

    def weight(self, name, shape, fan_in=None):
        fan_in = fan_in or shape[-2]
        arr = (self.rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)
        self.params[self.prefix + name] = arr
        return arr

    def zeros(self, name, shape):
        self.params[self.prefix + name] = np.zeros(shape, np.float32)

    def ones(self, name, shape):
        self.params[self.prefix + name] = np.ones(shape, np.float32)

    def linear(self, name, n_in, n_out, bias=True, stack=None):
        lead = () if stack is None else (stack,)
        self.weight(f"{name}.w", lead + (n_in, n_out), fan_in=n_in)
        if bias:
            self.zeros(f"{name}.b", lead + ((1,) if stack else ()) + (n_out,))


def linear(p, name, x):
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def mask_bias(mask):
    """Additive logit bias from a 0/1 key mask of shape (B, M)."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=ad.default_dtype())
    return ((1.0 - mask) * NEG_INF)[:, None, :]


def attention(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d)) v; returns (output, weights)."""
    d = q.shape[-1]
    logits = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    w = ad.softmax(logits)
    return w @ v, w


def init_transformer_layer(pb, dim, ff_mult=4):
    pb.linear("q", dim, dim, bias=False)
    pb.linear("k", dim, dim, bias=False)
    pb.linear("v", dim, dim, bias=False)
    pb.linear("o", dim, dim)
    pb.ones("ln1.g", (dim,))
    pb.zeros("ln1.b", (dim,))
    pb.linear("ff1", dim, ff_mult * dim)
    pb.linear("ff2", ff_mult * dim, dim)
    pb.ones("ln2.g", (dim,))
    pb.zeros("ln2.b", (dim,))


def transformer_layer(p, name, x, heads, key_mask=None, pre_norm=False):
    """Encoder layer: multi-head self-attention then feed-forward.

    ``pre_norm`` normalises branch inputs and leaves the residual stream
    unnormalised; otherwise the classic post-norm arrangement is used.
    """
    B, N, E = x.shape
    dh = E // heads

    def split(t):
        return t.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)

    def norm(t, i):
        return ad.layer_norm(t) * p[f"{name}.ln{i}.g"] + p[f"{name}.ln{i}.b"]

    h = norm(x, 1) if pre_norm else x
    q = split(linear(p, f"{name}.q", h))
    k = split(linear(p, f"{name}.k", h))
    v = split(linear(p, f"{name}.v", h))
    bias = None
    if key_mask is not None:
        bias = mask_bias(key_mask)[:, None]          # (B,1,1,N)
    out, _ = attention(q, k, v, bias)
    out = linear(p, f"{name}.o", out.transpose(0, 2, 1, 3).reshape(B, N, E))
    if pre_norm:
        x = x + out
        return x + linear(p, f"{name}.ff2", ad.elu(linear(p, f"{name}.ff1", norm(x, 2))))
    x = norm(x + out, 1)
    return norm(x + linear(p, f"{name}.ff2", ad.elu(linear(p, f"{name}.ff1", x))), 2)


def init_gated_pool(pb, dim, hidden):
    pb.linear("a", dim, hidden)
    pb.linear("b", dim, hidden)
    pb.linear("c", hidden, 1)


def gated_pool(p, name, x, mask=None):
    """Gated global attention pooling over the instance axis.

    x: (B, N, E) -> pooled (B, E), weights (B, N).
    """
    a = ad.tanh(linear(p, f"{name}.a", x))
    b = ad.sigmoid(linear(p, f"{name}.b", x))
    logits = linear(p, f"{name}.c", a * b)            # (B,N,1)
    B, N = x.shape[0], x.shape[1]
    logits = logits.reshape(B, 1, N)
    if mask is not None:
        logits = logits + mask_bias(mask)
    w = ad.softmax(logits)                            # (B,1,N)
    pooled = (w @ x).reshape(B, x.shape[2])
    return pooled, w.reshape(B, N)


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Fixed sinusoidal features for integer timesteps ``t`` (shape (B,))."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(ad.default_dtype())
