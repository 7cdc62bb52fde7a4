"""Multi-head attention, the three-layer pointwise refinement network, and
transformer encoder layers usable in both self- and cross-modal configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, EmptyAttentionError
from .tensor import (
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax_lastdim,
    take_rows,
    transpose,
)


@dataclass
class AttentionParams:
    """Projection matrices for one multi-head attention block.

    All four maps are (d_model, d_model); scores are scaled by exactly
    1/sqrt(d_k) with d_k = d_model / num_heads.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_k(self):
        return self.d_model // self.num_heads

    def validate(self):
        d = self.d_model
        if self.num_heads < 1 or d % self.num_heads != 0:
            raise DimensionError(
                f"d_model {d} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class FfnParams:
    """Three weight/bias pairs: d_model -> d_ff -> d_ff -> d_model."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor


@dataclass
class EncoderLayerParams:
    """One encoder layer: attention + FFN with two post-norm residual stages."""

    attn: AttentionParams
    ffn: FfnParams
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor


def multi_head_attention(params, query_seq, kv_seq, kv_mask=None):
    """Attend from `query_seq` (Lq, d) over `kv_seq` (Lkv, d).

    Masked key/value positions (mask entry 0) are dropped before the score
    computation, which gives them exactly zero attention weight and keeps the
    output bit-identical under any change to masked embeddings or padding.
    Self-attention is the special case kv_seq is query_seq.
    """
    d = params.d_model
    if query_seq.shape[-1] != d or kv_seq.shape[-1] != d:
        raise DimensionError(
            f"attention expects width {d}, got query {query_seq.shape} kv {kv_seq.shape}"
        )
    kv = kv_seq
    if kv_mask is not None:
        idx = np.flatnonzero(np.asarray(kv_mask))
        if idx.size == 0:
            raise EmptyAttentionError("attention over fully masked keys/values")
        if idx.size != kv_seq.shape[0]:
            kv = take_rows(kv_seq, idx)

    lq = query_seq.shape[0]
    lk = kv.shape[0]
    heads, dk = params.num_heads, params.d_k
    q = matmul(query_seq, params.w_q)
    k = matmul(kv, params.w_k)
    v = matmul(kv, params.w_v)
    qh = transpose(reshape(q, (lq, heads, dk)), (1, 0, 2))  # (H, Lq, dk)
    kh = transpose(reshape(k, (lk, heads, dk)), (1, 2, 0))  # (H, dk, Lk)
    vh = transpose(reshape(v, (lk, heads, dk)), (1, 0, 2))  # (H, Lk, dk)
    scores = mul(matmul(qh, kh), 1.0 / math.sqrt(dk))
    weights = softmax_lastdim(scores)
    ctx = matmul(weights, vh)  # (H, Lq, dk)
    merged = reshape(transpose(ctx, (1, 0, 2)), (lq, d))
    return matmul(merged, params.w_o)


def pointwise_ffn(params, x):
    """Apply the same 3-layer ReLU network to every position independently."""
    h = relu(add(matmul(x, params.w1), params.b1))
    h = relu(add(matmul(h, params.w2), params.b2))
    return add(matmul(h, params.w3), params.b3)


def encoder_layer(params, query_seq, kv_seq, kv_mask=None):
    """Attention -> residual (query stream) -> norm -> FFN -> residual -> norm."""
    attended = multi_head_attention(params.attn, query_seq, kv_seq, kv_mask)
    h = layer_norm(add(query_seq, attended), params.norm1_gain, params.norm1_bias)
    refined = pointwise_ffn(params.ffn, h)
    return layer_norm(add(h, refined), params.norm2_gain, params.norm2_bias)


def sinusoidal_pe(length, d):
    """Standard sine/cosine positional encoding, shape (length, d), d even."""
    if d % 2 != 0:
        raise ContractError(f"positional encoding width must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)
