"""Neural building blocks: positional encoding, embedding, attention, GRU, FFN, layer norm.

All layers operate on tensors shaped ``(..., T, width)``; any leading axes are
treated as batch axes.  Parameters are grouped in small dataclasses so that
they can be enumerated by name for optimisation and checkpointing.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class ConfigurationError(ValueError):
    """A layer or model was configured with inconsistent settings."""


class ParamGroup:
    """Mixin giving dataclass parameter groups a flat, ordered name view."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParamGroup):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from item.named_tensors(f"{name}.{i}.")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return ad.parameter(np.zeros(shape))


def _ones(shape) -> Tensor:
    return ad.parameter(np.ones(shape))


# ----------------------------------------------------------------------
# positional encoding and embedding
# ----------------------------------------------------------------------
def positional_encoding(T: int, d_model: int) -> Tensor:
    """Fixed sinusoidal table of shape ``(T, d_model)``."""
    if T < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {T}")
    if d_model < 2 or d_model % 2:
        raise ConfigurationError(f"d_model must be even, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    table = np.empty((T, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table)


@dataclass
class EmbeddingParams(ParamGroup):
    W_emb: Tensor  # (2D, d_model)
    b_emb: Tensor  # (d_model,)

    @classmethod
    def init(cls, D: int, d_model: int, rng: np.random.Generator) -> "EmbeddingParams":
        return cls(W_emb=_uniform(rng, 2 * D, (2 * D, d_model)), b_emb=_zeros((d_model,)))


def embed(x_hat, m_hat, p: EmbeddingParams, pos_enc: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Project ``concat(x_hat, m_hat)`` to ``d_model`` and add the positional table.

    Returns the forward embedding and its time-reversed copy.
    """
    x_hat, m_hat = ad.as_tensor(x_hat), ad.as_tensor(m_hat)
    if x_hat.shape != m_hat.shape:
        raise DimensionError(f"embed: values {x_hat.shape} and mask {m_hat.shape} differ")
    if 2 * x_hat.shape[-1] != p.W_emb.shape[0]:
        raise DimensionError(
            f"embed: input width 2*{x_hat.shape[-1]} does not match W_emb {p.W_emb.shape}"
        )
    if pos_enc is None:
        pos_enc = positional_encoding(x_hat.shape[-2], p.W_emb.shape[1])
    e = ad.concat_lastaxis([x_hat, m_hat]) @ p.W_emb + p.b_emb + pos_enc
    return e, ad.reverse_timeaxis(e)


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------
def scaled_dot_product_attention(q, k, v, dropout: float = 0.0, rng=None, train: bool = False):
    """Return ``(softmax(q k^T / sqrt(d_k)) v, weights)``.

    ``weights`` are the pre-dropout attention probabilities.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d_k = q.shape[-1]
    if d_k == 0:
        raise ConfigurationError("attention key width d_k must be positive")
    if k.shape[-1] != d_k:
        raise DimensionError(f"attention: query {q.shape} and key {k.shape} widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: key {k.shape} and value {v.shape} lengths differ")
    scores = (q @ ad.transpose_last2(k)) * (1.0 / math.sqrt(d_k))
    weights = ad.softmax_lastaxis(scores)
    out = ad.dropout(weights, dropout, rng, train) @ v
    return out, weights


@dataclass
class MultiHeadAttentionParams(ParamGroup):
    """Column block ``i`` of each projection belongs to head ``i``."""

    W_Q: Tensor  # (d_model, h * d_k)
    W_K: Tensor  # (d_model, h * d_k)
    W_V: Tensor  # (d_model, h * d_v)
    W_O: Tensor  # (h * d_v, d_model)
    heads: int = dataclasses.field(default=1, metadata={"static": True})
    b_Q: Tensor | None = None
    b_K: Tensor | None = None
    b_V: Tensor | None = None
    b_O: Tensor | None = None

    def named_tensors(self, prefix: str = ""):
        for name in ("W_Q", "W_K", "W_V", "W_O", "b_Q", "b_K", "b_V", "b_O"):
            value = getattr(self, name)
            if value is not None:
                yield prefix + name, value

    @classmethod
    def init(cls, d_model: int, heads: int, d_k: int, d_v: int, rng, bias: bool = True):
        if heads < 1 or d_k < 1 or d_v < 1:
            raise ConfigurationError(f"invalid attention sizes h={heads} d_k={d_k} d_v={d_v}")
        return cls(
            W_Q=_uniform(rng, d_model, (d_model, heads * d_k)),
            W_K=_uniform(rng, d_model, (d_model, heads * d_k)),
            W_V=_uniform(rng, d_model, (d_model, heads * d_v)),
            W_O=_uniform(rng, heads * d_v, (heads * d_v, d_model)),
            heads=heads,
            b_Q=_zeros((heads * d_k,)) if bias else None,
            b_K=_zeros((heads * d_k,)) if bias else None,
            b_V=_zeros((heads * d_v,)) if bias else None,
            b_O=_zeros((d_model,)) if bias else None,
        )


def _project(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = x @ w
    return out if b is None else out + b


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., T, h*d) -> (..., h, T, d)
    width = x.shape[-1] // heads
    x = ad.reshape(x, x.shape[:-1] + (heads, width))
    return ad.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, T, d) -> (..., T, h*d)
    x = ad.swapaxes(x, -3, -2)
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head_attention(q, k, v, p: MultiHeadAttentionParams, dropout: float = 0.0,
                         rng=None, train: bool = False) -> tuple[Tensor, Tensor]:
    """Multi-head attention; returns the projected output and head-averaged weights."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d_model = p.W_Q.shape[0]
    for name, t in (("query", q), ("key", k), ("value", v)):
        if t.shape[-1] != d_model:
            raise DimensionError(f"attention {name} width {t.shape[-1]} != d_model {d_model}")
    h = p.heads
    if p.W_V.shape[1] != p.W_O.shape[0]:
        raise DimensionError(f"attention: h*d_v = {p.W_V.shape[1]} does not match W_O {p.W_O.shape}")
    Q = _split_heads(_project(q, p.W_Q, p.b_Q), h)
    K = _split_heads(_project(k, p.W_K, p.b_K), h)
    V = _split_heads(_project(v, p.W_V, p.b_V), h)
    heads_out, weights = scaled_dot_product_attention(Q, K, V, dropout, rng, train)
    out = _project(_merge_heads(heads_out), p.W_O, p.b_O)
    return out, ad.mean(weights, axis=-3)


# ----------------------------------------------------------------------
# GRU
# ----------------------------------------------------------------------
@dataclass
class GruParams(ParamGroup):
    W_ir: Tensor
    W_iz: Tensor
    W_in: Tensor
    W_hr: Tensor
    W_hz: Tensor
    W_hn: Tensor
    b_ir: Tensor | None = None
    b_iz: Tensor | None = None
    b_in: Tensor | None = None
    b_hr: Tensor | None = None
    b_hz: Tensor | None = None
    b_hn: Tensor | None = None

    @classmethod
    def init(cls, d_in: int, d_h: int, rng, bias: bool = True) -> "GruParams":
        def w(fan_in, rows):
            return _uniform(rng, fan_in, (rows, d_h))

        def b():
            return _zeros((d_h,)) if bias else None

        return cls(
            W_ir=w(d_in, d_in), W_iz=w(d_in, d_in), W_in=w(d_in, d_in),
            W_hr=w(d_h, d_h), W_hz=w(d_h, d_h), W_hn=w(d_h, d_h),
            b_ir=b(), b_iz=b(), b_in=b(), b_hr=b(), b_hz=b(), b_hn=b(),
        )

    @property
    def hidden_size(self) -> int:
        return self.W_hr.shape[1]


def _stacked(ws, bs):
    w = ad.concat_lastaxis(ws)
    if any(b is None for b in bs):
        return w, None
    return w, ad.concat_lastaxis(bs)


def gru_recurrence(xp, w_h, b_h, h0) -> Tensor:
    """Fused recurrence over precomputed input projections.

    ``xp`` is ``(..., T, 3 d_h)`` holding ``[x W_ir + b_ir | x W_iz + b_iz | x W_in + b_in]``;
    ``w_h`` is ``(d_h, 3 d_h)`` stacked the same way and ``h0`` is ``(..., d_h)``.
    The backward rule is hand-written back-propagation through time.
    """
    xp, w_h, h0 = ad.as_tensor(xp), ad.as_tensor(w_h), ad.as_tensor(h0)
    b_h = None if b_h is None else ad.as_tensor(b_h)
    d = w_h.shape[0]
    T = xp.shape[-2]
    X, W = xp.data, w_h.data
    bias = 0.0 if b_h is None else b_h.data
    h = np.broadcast_to(h0.data, xp.shape[:-2] + (d,))
    states = np.empty(xp.shape[:-1] + (d,))
    saved = []
    for t in range(T):
        xt = X[..., t, :]
        hp = h @ W + bias
        r = ad._sigmoid(xt[..., :d] + hp[..., :d])
        z = ad._sigmoid(xt[..., d:2 * d] + hp[..., d:2 * d])
        hn = hp[..., 2 * d:]
        n = np.tanh(xt[..., 2 * d:] + r * hn)
        h_new = (1.0 - z) * n + z * h
        saved.append((h, r, z, n, hn))
        states[..., t, :] = h_new
        h = h_new

    def backward(g):
        dxp = np.empty(X.shape)
        dW = np.zeros_like(W)
        db = np.zeros(3 * d)
        dh = np.zeros(g.shape[:-2] + (d,))
        for t in reversed(range(T)):
            h_prev, r, z, n, hn = saved[t]
            dh = dh + g[..., t, :]
            dn = dh * (1.0 - z)
            da_z = dh * (h_prev - n) * z * (1.0 - z)
            da_n = dn * (1.0 - n * n)
            da_r = da_n * hn * r * (1.0 - r)
            dhp = np.concatenate([da_r, da_z, da_n * r], axis=-1)
            dxp[..., t, :d] = da_r
            dxp[..., t, d:2 * d] = da_z
            dxp[..., t, 2 * d:] = da_n
            dW += h_prev.reshape(-1, d).T @ dhp.reshape(-1, 3 * d)
            db += dhp.reshape(-1, 3 * d).sum(axis=0)
            dh = dh * z + dhp @ W.T
        grads = [dxp, dW] + ([db] if b_h is not None else [])
        return grads + [ad._unbroadcast(dh, h0.shape)]

    parents = (xp, w_h, b_h, h0) if b_h is not None else (xp, w_h, h0)
    return ad._make(states, parents, backward, "gru")


def gru_forward(x, p: GruParams, h0=None) -> Tensor:
    """Run the GRU over the time axis and return every hidden state ``(..., T, d_h)``."""
    x = ad.as_tensor(x)
    d_h = p.hidden_size
    if x.shape[-1] != p.W_ir.shape[0]:
        raise DimensionError(f"GRU input width {x.shape[-1]} != {p.W_ir.shape[0]}")
    if h0 is None:
        h0 = Tensor(np.zeros(d_h))
    elif ad.as_tensor(h0).shape[-1] != d_h:
        raise DimensionError(f"GRU initial state width {ad.as_tensor(h0).shape[-1]} != {d_h}")
    w_i, b_i = _stacked([p.W_ir, p.W_iz, p.W_in], [p.b_ir, p.b_iz, p.b_in])
    w_h, b_h = _stacked([p.W_hr, p.W_hz, p.W_hn], [p.b_hr, p.b_hz, p.b_hn])
    return gru_recurrence(_project(x, w_i, b_i), w_h, b_h, h0)


# ----------------------------------------------------------------------
# feed-forward and normalisation
# ----------------------------------------------------------------------
@dataclass
class FfnParams(ParamGroup):
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor

    @classmethod
    def init(cls, d_model: int, d_ffn: int, rng) -> "FfnParams":
        return cls(
            W_1=_uniform(rng, d_model, (d_model, d_ffn)), b_1=_zeros((d_ffn,)),
            W_2=_uniform(rng, d_ffn, (d_ffn, d_model)), b_2=_zeros((d_model,)),
        )


def ffn(x, p: FfnParams) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != p.W_1.shape[0] or p.W_1.shape[1] != p.W_2.shape[0]:
        raise DimensionError(f"FFN: input {x.shape} vs W_1 {p.W_1.shape}, W_2 {p.W_2.shape}")
    return ad.elu(x @ p.W_1 + p.b_1) @ p.W_2 + p.b_2


@dataclass
class LayerNormParams(ParamGroup):
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(gain=_ones((d,)), bias=_zeros((d,)))


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = ad.as_tensor(x)
    centred = x - ad.mean(x, axis=-1, keepdims=True)
    var = ad.mean(centred * centred, axis=-1, keepdims=True)
    return centred * ad.power(var + eps, -0.5) * gain + bias
