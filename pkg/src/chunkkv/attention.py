"""Blocked mixed-precision decode attention and its exact reference.

The mixed path scores the query against each precision arena separately,
concatenates along the token axis, softmaxes once, and accumulates the
per-tier value products in the fixed order INT2, INT4, FP16. Because the
blocked sum commutes, reordering chunks never changes the result beyond
quantization error; the reference path computes the same attention naively
over full-precision K/V in original token order.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from chunkkv import quantizer
from chunkkv.kv_store import ChunkedKVCache

if TYPE_CHECKING:
    from chunkkv.toy_model import ToyModel


def stable_softmax(x, axis=-1):
    """Row softmax with max subtraction; -inf entries become weight 0.

    Rows must keep at least one finite entry.
    """
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class AttentionInstance:
    """One decode-side attention evaluation against a chunked cache.

    mask columns follow the cache's reordered logical sequence (INT2
    arena, INT4 arena, FP16 chunks, tail, decode tokens). None means all
    visible, the normal decode case where every cached token is in the
    past. scale defaults to 1/sqrt(head_dim).
    """

    q: np.ndarray
    cache: ChunkedKVCache
    mask: np.ndarray = None
    scale: float = field(default=None)

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q, dtype=np.float64)
        if self.q.ndim != 2:
            raise ValueError("q must be 2D (m x head_dim)")
        if self.q.shape[1] != self.cache.head_dim:
            raise ValueError("q width != cache head_dim")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.cache.head_dim)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != (self.q.shape[0], self.cache.total_tokens):
                raise ValueError("mask shape must be (m, total_tokens)")


def mixed_decode_attention(inst: AttentionInstance) -> np.ndarray:
    """Attention output over the three precision arenas.

    Matches reference_attention on the dequantized, order-restored K/V
    within quantization error; with every chunk at FP16 the two paths
    compute identical values.
    """
    cache = inst.cache
    if cache.total_tokens == 0:
        raise ValueError("cache holds no tokens")
    q = inst.q

    att2 = quantizer.fqm(q, cache.k_q2, transpose_block=True)
    att4 = quantizer.fqm(q, cache.k_q4, transpose_block=True)
    att16 = q @ cache.k_fp.T
    att = np.concatenate([att2, att4, att16], axis=1)
    att *= inst.scale
    if inst.mask is not None:
        att = att + inst.mask
    weights = stable_softmax(att, axis=1)

    n2 = cache.len_2
    n4 = cache.len_4
    a2 = weights[:, :n2]
    a4 = weights[:, n2 : n2 + n4]
    a16 = weights[:, n2 + n4 :]
    # fixed accumulation order keeps results deterministic across runs
    return quantizer.fqm(a2, cache.v_q2) + quantizer.fqm(a4, cache.v_q4) + a16 @ cache.v_fp


def reference_attention(q, k, v, mask=None, scale=None) -> np.ndarray:
    """Naive softmax(scale * q @ k.T + mask) @ v in float64."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError("attention shape mismatch")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    att = q @ k.T
    att *= scale
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != att.shape:
            raise ValueError("mask shape must be (m, tokens)")
        att = att + mask
    weights = stable_softmax(att, axis=1)
    return weights @ v


def causal_mask(n) -> np.ndarray:
    """0 on and below the diagonal, -inf strictly above."""
    return np.triu(np.full((n, n), -np.inf), k=1)


def prefill_attention(embeddings, model: "ToyModel", return_hidden=False):
    """Single-layer causal self-attention over the prompt.

    Returns the full-precision K and V projections (tokens x embed_dim,
    heads side by side) for cache construction, plus the last position's
    logits. Hidden states are embeddings plus the concatenated head
    outputs (a residual connection), optionally returned for tests.
    """
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != model.embed_dim:
        raise ValueError("embeddings must be (tokens, embed_dim)")
    n = emb.shape[0]
    q = emb @ model.w_q
    k = emb @ model.w_k
    v = emb @ model.w_v
    mask = causal_mask(n)
    d = model.head_dim
    outs = []
    for h in range(model.n_heads):
        cols = slice(h * d, (h + 1) * d)
        outs.append(reference_attention(q[:, cols], k[:, cols], v[:, cols], mask))
    hidden = emb + np.concatenate(outs, axis=1)
    logits = hidden @ model.w_o
    if return_hidden:
        return k, v, logits[-1], hidden
    return k, v, logits[-1]
