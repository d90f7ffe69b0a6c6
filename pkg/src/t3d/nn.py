"""Shared differentiable layers and initialization helpers.

Parameters live in flat dicts mapping dotted names to Tensors. Leaf-name
conventions drive optimizer behavior: names ending in ".w" or "_emb" take
weight decay, biases and norm gains/biases do not.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateAttentionError, DegenerateNormError

MASK_FILL = -1e9  # additive attention mask; underflows to exactly 0 after softmax
LN_EPS = 1e-5


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def param(rng, shape, std) -> Tensor:
    return Tensor(trunc_normal(rng, shape, std), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Normalize rows (last axis) to unit Euclidean norm."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    if float(sq.data.min()) < min_norm * min_norm:
        raise DegenerateNormError("cannot normalize a (near-)zero vector")
    return x / sq.sqrt()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + LN_EPS).sqrt() * gain + bias


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int) -> Tensor:
    """Per-sample normalization over channel groups of a (B, C, X, Y, Z) map."""
    b, c = x.shape[0], x.shape[1]
    spatial = x.shape[2:]
    g = x.reshape(b, groups, -1)
    mu = g.mean(axis=-1, keepdims=True)
    centered = g - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = (centered / (var + LN_EPS).sqrt()).reshape(b, c, *spatial)
    shape = (1, c) + (1,) * len(spatial)
    return normed * gain.reshape(shape) + bias.reshape(shape)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d/heads)."""
    *lead, L, d = x.shape
    hd = d // n_heads
    x = x.reshape(*lead, L, n_heads, hd)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, hd) -> (..., L, heads*hd)."""
    *lead, h, L, hd = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(*lead, L, h * hd)


def additive_key_mask(mask: np.ndarray, extra_dims: int) -> np.ndarray:
    """Boolean key mask (B, L) -> additive floats shaped (B, 1..., 1, L)."""
    if not np.all(mask.any(axis=-1)):
        raise DegenerateAttentionError("attention requires at least one unmasked key")
    add = np.where(mask, 0.0, MASK_FILL)
    return add.reshape(mask.shape[0], *([1] * extra_dims), mask.shape[-1])


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q: (..., Lq, d), k/v: (..., Lk, d) with broadcastable leading dims.
    key_mask is a boolean (B, Lk) array; masked keys receive exactly zero
    attention weight (the additive fill underflows in the softmax).
    """
    hd = q.shape[-1] // n_heads
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    scores = (qh @ kh.transpose(*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)) * (1.0 / np.sqrt(hd))
    if key_mask is not None:
        scores = scores + additive_key_mask(key_mask, scores.ndim - 2)
    weights = ad.softmax(scores, axis=-1)
    return merge_heads(weights @ vh)


def init_attention(rng, d_q: int, d_kv: int, d_out: int, prefix: str, params: dict) -> None:
    """Projection weights for one attention site (query/key/value/output)."""
    std_q = np.sqrt(1.0 / d_q)
    std_kv = np.sqrt(1.0 / d_kv)
    std_o = np.sqrt(1.0 / d_out)
    params[f"{prefix}.wq.w"] = param(rng, (d_q, d_out), std_q)
    params[f"{prefix}.wq.b"] = zeros(d_out)
    params[f"{prefix}.wk.w"] = param(rng, (d_kv, d_out), std_kv)
    params[f"{prefix}.wk.b"] = zeros(d_out)
    params[f"{prefix}.wv.w"] = param(rng, (d_kv, d_out), std_kv)
    params[f"{prefix}.wv.b"] = zeros(d_out)
    params[f"{prefix}.wo.w"] = param(rng, (d_out, d_out), std_o)
    params[f"{prefix}.wo.b"] = zeros(d_out)


def init_ffn(rng, d: int, hidden: int, prefix: str, params: dict) -> None:
    params[f"{prefix}.w1.w"] = param(rng, (d, hidden), np.sqrt(1.0 / d))
    params[f"{prefix}.w1.b"] = zeros(hidden)
    params[f"{prefix}.w2.w"] = param(rng, (hidden, d), np.sqrt(1.0 / hidden))
    params[f"{prefix}.w2.b"] = zeros(d)


def init_layer_norm(prefix: str, d: int, params: dict) -> None:
    params[f"{prefix}.gain"] = ones(d)
    params[f"{prefix}.bias"] = zeros(d)


def ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.gelu(linear(x, params[f"{prefix}.w1.w"], params[f"{prefix}.w1.b"]))
    return linear(h, params[f"{prefix}.w2.w"], params[f"{prefix}.w2.b"])


def ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def attention_block(q_src: Tensor, kv_src: Tensor, params: dict, prefix: str,
                    n_heads: int, key_mask: np.ndarray | None) -> Tensor:
    """Attention with learned projections: inputs are already normalized."""
    q = linear(q_src, params[f"{prefix}.wq.w"], params[f"{prefix}.wq.b"])
    k = linear(kv_src, params[f"{prefix}.wk.w"], params[f"{prefix}.wk.b"])
    v = linear(kv_src, params[f"{prefix}.wv.w"], params[f"{prefix}.wv.b"])
    out = attention(q, k, v, n_heads, key_mask)
    return linear(out, params[f"{prefix}.wo.w"], params[f"{prefix}.wo.b"])


def decays(name: str) -> bool:
    """Whether a parameter participates in decoupled weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "w" or name.endswith("_emb")
