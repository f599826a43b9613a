"""Seeded single-layer toy transformer.

Stands in for a real LLM so the full prefill / reorder / quantize / decode
loop can run deterministically at desk scale. Weights are uniform in
(-1/sqrt(embed_dim), 1/sqrt(embed_dim)) from a seeded generator; positions
are sinusoidal and added to token embeddings before projection, so K rows
carry position and survive chunk reordering untouched.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from chunkkv import kv_store
from chunkkv.attention import AttentionInstance, mixed_decode_attention, reference_attention


class ToyModel:
    def __init__(self, vocab_size=512, embed_dim=64, n_heads=4, seed=0):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if embed_dim % n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.seed = seed
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(embed_dim)
        # draw order is part of the determinism contract
        self.w_e = rng.uniform(-bound, bound, size=(vocab_size, embed_dim))
        self.w_q = rng.uniform(-bound, bound, size=(embed_dim, embed_dim))
        self.w_k = rng.uniform(-bound, bound, size=(embed_dim, embed_dim))
        self.w_v = rng.uniform(-bound, bound, size=(embed_dim, embed_dim))
        self.w_o = rng.uniform(-bound, bound, size=(embed_dim, vocab_size))

    def positional(self, start, count) -> np.ndarray:
        """Sinusoidal position rows for positions start .. start+count-1."""
        pos = np.arange(start, start + count, dtype=np.float64)[:, None]
        i = np.arange(self.embed_dim, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, (np.floor(i / 2.0) * 2.0) / self.embed_dim)
        return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))

    def embed(self, tokens, start_pos=0) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("tokens must be a flat sequence")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("token id out of range")
        return self.w_e[ids] + self.positional(start_pos, ids.shape[0])

    def next_token(self, hidden) -> int:
        """Greedy pick over the output head; ties break to the lowest id."""
        hidden = np.asarray(hidden, dtype=np.float64).reshape(-1)
        logits = hidden @ self.w_o
        return int(np.argmax(logits))


@dataclass
class GenerationResult:
    tokens: list
    final_hidden: np.ndarray
    step_seconds: list


def generate(model: ToyModel, caches, first_token, steps, start_pos,
             use_reference=False) -> GenerationResult:
    """Greedy decode for `steps` tokens, one K/V append per head per step.

    caches holds one ChunkedKVCache per head, already covering the prompt.
    first_token is the prompt's greedy continuation (from prefill logits);
    each step embeds the previous token, appends its K/V, attends over the
    cache, and emits the argmax token. use_reference swaps the mixed
    attention for reference_attention over the reconstructed cache, which
    exists so tests can compare the two paths step for step.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if len(caches) != model.n_heads:
        raise ValueError("need one cache per head")
    d = model.head_dim
    tokens = []
    step_seconds = []
    hidden = None
    prev = int(first_token)
    for s in range(steps):
        t0 = time.perf_counter()
        emb = model.embed([prev], start_pos=start_pos + s)
        q = emb @ model.w_q
        k = emb @ model.w_k
        v = emb @ model.w_v
        outs = []
        for h, cache in enumerate(caches):
            cols = slice(h * d, (h + 1) * d)
            kv_store.append_decode_token(cache, k[0, cols], v[0, cols])
            if use_reference:
                k_full, v_full = kv_store.reconstruct(cache)
                outs.append(reference_attention(q[:, cols], k_full, v_full))
            else:
                inst = AttentionInstance(q=q[:, cols], cache=cache)
                outs.append(mixed_decode_attention(inst))
        hidden = emb + np.concatenate(outs, axis=1)
        prev = model.next_token(hidden[0])
        tokens.append(prev)
        step_seconds.append(time.perf_counter() - t0)
    final_hidden = hidden[0] if hidden is not None else None
    return GenerationResult(tokens=tokens, final_hidden=final_hidden, step_seconds=step_seconds)
