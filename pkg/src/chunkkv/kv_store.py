"""Tier-contiguous chunked KV cache for one attention head.

At prefill end the context's full chunks are grouped by tier (INT2, then
INT4, then FP16), each quantized tier living in one contiguous arena; the
chunk permutation is recorded so callers can map back to original order.
The FP16 arena holds, in order: FP16-tier chunks, the context tail
(remainder shorter than one chunk), and every token appended during
decode. The permutation is fixed once; decode only ever grows the FP16
region.
"""

from dataclasses import dataclass
import struct

import numpy as np

from chunkkv import quantizer
from chunkkv.quantizer import QuantizedBlock
from chunkkv.tiers import Tier

_HEADER = struct.Struct("<8I")


class ChunkedKVCache:
    """Per-head cache: two quantized arenas, one growing float arena.

    Float arenas are stored widest (float64) so reconstruction of FP16-tier
    chunks, tail and decode tokens is exact; memory accounting charges them
    at their nominal 2 bytes per element (see memory_footprint).
    """

    def __init__(self, chunk_size, head_dim, group_size, context_len, perm,
                 k_q2, v_q2, k_q4, v_q4, k_fp, v_fp):
        self.chunk_size = int(chunk_size)
        self.head_dim = int(head_dim)
        self.group_size = int(group_size)
        self.context_len = int(context_len)
        self.perm = np.ascontiguousarray(perm, dtype=np.uint32)
        self.k_q2 = k_q2
        self.v_q2 = v_q2
        self.k_q4 = k_q4
        self.v_q4 = v_q4
        k_fp = np.ascontiguousarray(k_fp, dtype=np.float64).reshape(-1, self.head_dim)
        v_fp = np.ascontiguousarray(v_fp, dtype=np.float64).reshape(-1, self.head_dim)
        if k_fp.shape != v_fp.shape:
            raise ValueError("k_fp and v_fp shapes differ")
        self._len_fp = k_fp.shape[0]
        cap = max(8, self._len_fp)
        self._k_fp = np.zeros((cap, self.head_dim), dtype=np.float64)
        self._v_fp = np.zeros((cap, self.head_dim), dtype=np.float64)
        self._k_fp[: self._len_fp] = k_fp
        self._v_fp[: self._len_fp] = v_fp
        self._validate()

    def _validate(self):
        n = self.n_chunks
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ValueError("perm is not a permutation of 0..N-1")
        for name, block in (("k_q2", self.k_q2), ("v_q2", self.v_q2),
                            ("k_q4", self.k_q4), ("v_q4", self.v_q4)):
            if block.cols != self.head_dim:
                raise ValueError(f"{name} cols != head_dim")
            if block.group_size != self.group_size:
                raise ValueError(f"{name} group_size mismatch")
        if self.k_q2.rows != self.v_q2.rows or self.k_q4.rows != self.v_q4.rows:
            raise ValueError("K/V arena row counts differ")
        if self.k_q2.bitwidth != 2 or self.k_q4.bitwidth != 4:
            raise ValueError("arena bitwidths must be 2 and 4")
        if self.len_2 % self.chunk_size or self.len_4 % self.chunk_size:
            raise ValueError("quantized arena lengths must be chunk multiples")
        if not 0 <= self.tail_len < self.chunk_size:
            raise ValueError("context_len inconsistent with chunk count")
        if self.decode_len < 0:
            raise ValueError("fp arena shorter than FP16 chunks plus tail")

    # -- derived sizes ---------------------------------------------------

    @property
    def len_2(self) -> int:
        return self.k_q2.rows

    @property
    def len_4(self) -> int:
        return self.k_q4.rows

    @property
    def len_fp(self) -> int:
        return self._len_fp

    @property
    def n_chunks(self) -> int:
        return self.perm.shape[0]

    @property
    def total_tokens(self) -> int:
        return self.len_2 + self.len_4 + self.len_fp

    @property
    def tail_len(self) -> int:
        return self.context_len - self.n_chunks * self.chunk_size

    @property
    def n_fp_chunks(self) -> int:
        return self.n_chunks - self.len_2 // self.chunk_size - self.len_4 // self.chunk_size

    @property
    def decode_len(self) -> int:
        return self.len_fp - self.n_fp_chunks * self.chunk_size - self.tail_len

    @property
    def k_fp(self) -> np.ndarray:
        return self._k_fp[: self._len_fp]

    @property
    def v_fp(self) -> np.ndarray:
        return self._v_fp[: self._len_fp]

    @property
    def tiers(self) -> list:
        """Tier per original chunk index, recovered from perm and lengths."""
        n2 = self.len_2 // self.chunk_size
        n4 = self.len_4 // self.chunk_size
        out = [None] * self.n_chunks
        for pos, orig in enumerate(self.perm.tolist()):
            if pos < n2:
                out[orig] = Tier.INT2
            elif pos < n2 + n4:
                out[orig] = Tier.INT4
            else:
                out[orig] = Tier.FP16
        return out

    # -- mutation ---------------------------------------------------------

    def append(self, k_vec, v_vec):
        k_vec = np.asarray(k_vec, dtype=np.float64).reshape(-1)
        v_vec = np.asarray(v_vec, dtype=np.float64).reshape(-1)
        if k_vec.shape != (self.head_dim,) or v_vec.shape != (self.head_dim,):
            raise ValueError(f"decode vectors must have dimension {self.head_dim}")
        if self._len_fp == self._k_fp.shape[0]:
            new_cap = max(8, 2 * self._k_fp.shape[0])
            for name in ("_k_fp", "_v_fp"):
                grown = np.zeros((new_cap, self.head_dim), dtype=np.float64)
                grown[: self._len_fp] = getattr(self, name)[: self._len_fp]
                setattr(self, name, grown)
        self._k_fp[self._len_fp] = k_vec
        self._v_fp[self._len_fp] = v_vec
        self._len_fp += 1

    @classmethod
    def empty(cls, head_dim, chunk_size=32, group_size=32) -> "ChunkedKVCache":
        """A cache with no context: behaves as a pure FP16 rolling cache."""
        empty_mat = np.zeros((0, head_dim), dtype=np.float64)
        return cls(
            chunk_size=chunk_size,
            head_dim=head_dim,
            group_size=group_size,
            context_len=0,
            perm=np.zeros(0, dtype=np.uint32),
            k_q2=quantizer.quantize(empty_mat, 2, group_size),
            v_q2=quantizer.quantize(empty_mat, 2, group_size),
            k_q4=quantizer.quantize(empty_mat, 4, group_size),
            v_q4=quantizer.quantize(empty_mat, 4, group_size),
            k_fp=empty_mat,
            v_fp=empty_mat,
        )


def build_cache(k, v, tiers, chunk_set, group_size=32) -> ChunkedKVCache:
    """Reorder context chunks tier-contiguously and quantize the INT arenas.

    k and v cover exactly the context (chunk_set.context_len rows). Chunks
    keep their original relative order inside each tier, so perm restricted
    to one tier is strictly increasing.
    """
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if k.ndim != 2 or k.shape != v.shape:
        raise ValueError("k and v must be equal-shape 2D matrices")
    if k.shape[0] != chunk_set.context_len:
        raise ValueError(
            f"k/v rows ({k.shape[0]}) != chunk_set context length ({chunk_set.context_len})"
        )
    tiers = [Tier(t) for t in tiers]
    if len(tiers) != chunk_set.n:
        raise ValueError(f"tier list length {len(tiers)} != chunk count {chunk_set.n}")
    cs = chunk_set.chunk_size
    head_dim = k.shape[1]

    by_tier = {Tier.INT2: [], Tier.INT4: [], Tier.FP16: []}
    for i, t in enumerate(tiers):
        by_tier[t].append(i)

    def gather_from(mat, idxs):
        if not idxs:
            return np.zeros((0, head_dim), dtype=np.float64)
        return np.concatenate([mat[i * cs : (i + 1) * cs] for i in idxs])

    tail = k[chunk_set.n * cs :]
    tail_v = v[chunk_set.n * cs :]
    k_fp = np.concatenate([gather_from(k, by_tier[Tier.FP16]), tail])
    v_fp = np.concatenate([gather_from(v, by_tier[Tier.FP16]), tail_v])

    perm = np.array(
        by_tier[Tier.INT2] + by_tier[Tier.INT4] + by_tier[Tier.FP16], dtype=np.uint32
    )
    return ChunkedKVCache(
        chunk_size=cs,
        head_dim=head_dim,
        group_size=group_size,
        context_len=chunk_set.context_len,
        perm=perm,
        k_q2=quantizer.quantize(gather_from(k, by_tier[Tier.INT2]), 2, group_size),
        v_q2=quantizer.quantize(gather_from(v, by_tier[Tier.INT2]), 2, group_size),
        k_q4=quantizer.quantize(gather_from(k, by_tier[Tier.INT4]), 4, group_size),
        v_q4=quantizer.quantize(gather_from(v, by_tier[Tier.INT4]), 4, group_size),
        k_fp=k_fp,
        v_fp=v_fp,
    )


def append_decode_token(cache: ChunkedKVCache, k_vec, v_vec):
    """Append one decode token's K/V row to the FP16 region."""
    cache.append(k_vec, v_vec)


def token_order(cache: ChunkedKVCache) -> np.ndarray:
    """Original position of every row in the cache's reordered sequence."""
    cs = cache.chunk_size
    parts = [np.arange(orig * cs, (orig + 1) * cs) for orig in cache.perm.tolist()]
    parts.append(np.arange(cache.n_chunks * cs, cache.context_len))
    parts.append(np.arange(cache.context_len, cache.context_len + cache.decode_len))
    return np.concatenate(parts).astype(np.int64)


def reconstruct(cache: ChunkedKVCache):
    """Scatter dequantized arenas back to original token order.

    Quantized chunks carry the per-group round-trip error; FP16 chunks,
    tail and decode tokens come back exactly.
    """
    rows_k = np.concatenate(
        [quantizer.dequantize(cache.k_q2), quantizer.dequantize(cache.k_q4), cache.k_fp]
    )
    rows_v = np.concatenate(
        [quantizer.dequantize(cache.v_q2), quantizer.dequantize(cache.v_q4), cache.v_fp]
    )
    order = token_order(cache)
    k = np.zeros_like(rows_k)
    v = np.zeros_like(rows_v)
    k[order] = rows_k
    v[order] = rows_v
    return k, v


@dataclass(frozen=True)
class MemoryReport:
    """Byte accounting at each tier's nominal precision.

    Quantized arenas count their packed words plus float64 scale/zero-point
    metadata; the FP16 region counts 2 bytes per element regardless of the
    wider in-memory dtype; metadata_bytes covers the serialized header and
    the chunk permutation. Baseline is the same cache held entirely at
    2 bytes per element.
    """

    int2_bytes: int
    int4_bytes: int
    fp16_bytes: int
    metadata_bytes: int
    fp16_baseline_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.int2_bytes + self.int4_bytes + self.fp16_bytes + self.metadata_bytes

    @property
    def compression_ratio(self) -> float:
        if self.fp16_baseline_bytes == 0:
            return 0.0
        return self.total_bytes / self.fp16_baseline_bytes

    def as_dict(self) -> dict:
        return {
            "int2_bytes": self.int2_bytes,
            "int4_bytes": self.int4_bytes,
            "fp16_bytes": self.fp16_bytes,
            "metadata_bytes": self.metadata_bytes,
            "fp16_baseline_bytes": self.fp16_baseline_bytes,
            "total_bytes": self.total_bytes,
            "compression_ratio": self.compression_ratio,
        }


def memory_footprint(cache: ChunkedKVCache) -> MemoryReport:
    def block_bytes(block: QuantizedBlock) -> int:
        return block.storage_bytes()

    fp_elems = cache.len_fp * cache.head_dim
    total_elems = cache.total_tokens * cache.head_dim
    return MemoryReport(
        int2_bytes=block_bytes(cache.k_q2) + block_bytes(cache.v_q2),
        int4_bytes=block_bytes(cache.k_q4) + block_bytes(cache.v_q4),
        fp16_bytes=2 * 2 * fp_elems,
        metadata_bytes=_HEADER.size + 4 * cache.n_chunks,
        fp16_baseline_bytes=2 * 2 * total_elems,
    )


def serialize_cache(cache: ChunkedKVCache) -> bytes:
    """Header, chunk permutation, the four quantized arenas in tier order,
    then the raw float64 FP16-region rows; bit-exact round trip."""
    header = _HEADER.pack(
        cache.n_chunks,
        cache.chunk_size,
        cache.head_dim,
        cache.len_2,
        cache.len_4,
        cache.len_fp,
        cache.context_len,
        cache.group_size,
    )
    return b"".join(
        (
            header,
            np.ascontiguousarray(cache.perm, dtype="<u4").tobytes(),
            quantizer.serialize_block(cache.k_q2),
            quantizer.serialize_block(cache.v_q2),
            quantizer.serialize_block(cache.k_q4),
            quantizer.serialize_block(cache.v_q4),
            np.ascontiguousarray(cache.k_fp, dtype="<f8").tobytes(),
            np.ascontiguousarray(cache.v_fp, dtype="<f8").tobytes(),
        )
    )


def deserialize_cache(buf) -> ChunkedKVCache:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated cache header")
    (n_chunks, chunk_size, head_dim, len_2, len_4, len_fp, context_len,
     group_size) = _HEADER.unpack_from(buf, 0)
    offset = _HEADER.size
    if offset + 4 * n_chunks > len(buf):
        raise ValueError("truncated permutation")
    perm = np.frombuffer(buf, dtype="<u4", count=n_chunks, offset=offset).astype(np.uint32)
    offset += 4 * n_chunks
    k_q2, offset = quantizer.deserialize_block(buf, offset)
    v_q2, offset = quantizer.deserialize_block(buf, offset)
    k_q4, offset = quantizer.deserialize_block(buf, offset)
    v_q4, offset = quantizer.deserialize_block(buf, offset)
    fp_count = len_fp * head_dim
    if offset + 2 * 8 * fp_count != len(buf):
        raise ValueError("FP region size inconsistent with header")
    k_fp = np.frombuffer(buf, dtype="<f8", count=fp_count, offset=offset).astype(np.float64)
    offset += 8 * fp_count
    v_fp = np.frombuffer(buf, dtype="<f8", count=fp_count, offset=offset).astype(np.float64)
    if k_q2.rows != len_2 or k_q4.rows != len_4:
        raise ValueError("arena lengths inconsistent with header")
    return ChunkedKVCache(
        chunk_size=chunk_size,
        head_dim=head_dim,
        group_size=group_size,
        context_len=context_len,
        perm=perm,
        k_q2=k_q2,
        v_q2=v_q2,
        k_q4=k_q4,
        v_q4=v_q4,
        k_fp=k_fp.reshape(len_fp, head_dim),
        v_fp=v_fp.reshape(len_fp, head_dim),
    )


def cache_layout(cache: ChunkedKVCache) -> list:
    """(name, offset, nbytes) per segment of the serialized form, in order.

    Each tier's data occupies one contiguous byte range: the two INT2
    blocks are adjacent, then the two INT4 blocks, then the FP region.
    """

    def block_wire_bytes(block: QuantizedBlock) -> int:
        return 16 + 2 * 8 * block.n_groups + 4 * block.packed.shape[0]

    segments = []
    offset = 0
    for name, size in (
        ("header", _HEADER.size),
        ("perm", 4 * cache.n_chunks),
        ("k_q2", block_wire_bytes(cache.k_q2)),
        ("v_q2", block_wire_bytes(cache.v_q2)),
        ("k_q4", block_wire_bytes(cache.k_q4)),
        ("v_q4", block_wire_bytes(cache.v_q4)),
        ("k_fp", 8 * cache.len_fp * cache.head_dim),
        ("v_fp", 8 * cache.len_fp * cache.head_dim),
    ):
        segments.append((name, offset, size))
        offset += size
    return segments
