"""chunkkv: chunk-adaptive mixed-precision KV-cache quantization engine.

Context chunks are scored against the query with a deterministic encoder;
low-relevance chunks are quantized to 2 or 4 bits with per-group min-max
affine quantization, the cache is reordered so each precision tier is
contiguous, and decode attention runs blocked over the three arenas. An
exact full-precision reference path verifies the blocked computation.
"""

from chunkkv.attention import (
    AttentionInstance,
    mixed_decode_attention,
    prefill_attention,
    reference_attention,
)
from chunkkv.harness import RunConfig, emit_report, run_single, run_sweep
from chunkkv.kernels import BACKEND
from chunkkv.kv_store import (
    ChunkedKVCache,
    append_decode_token,
    build_cache,
    deserialize_cache,
    memory_footprint,
    reconstruct,
    serialize_cache,
)
from chunkkv.quantizer import (
    QuantizedBlock,
    dequantize,
    deserialize_block,
    fqm,
    quantize,
    serialize_block,
)
from chunkkv.retrieval import (
    ChunkSet,
    Embedding,
    SimilarityReport,
    assign_tiers,
    build_similarity_report,
    compute_thresholds,
    cosine_similarity,
    encode,
    make_encoder,
    segment_context,
)
from chunkkv.tiers import Tier
from chunkkv.toy_model import ToyModel, generate

__version__ = "0.1.0"

__all__ = [
    "AttentionInstance",
    "BACKEND",
    "ChunkSet",
    "ChunkedKVCache",
    "Embedding",
    "QuantizedBlock",
    "RunConfig",
    "SimilarityReport",
    "Tier",
    "ToyModel",
    "append_decode_token",
    "assign_tiers",
    "build_cache",
    "build_similarity_report",
    "compute_thresholds",
    "cosine_similarity",
    "dequantize",
    "deserialize_block",
    "deserialize_cache",
    "emit_report",
    "encode",
    "fqm",
    "generate",
    "make_encoder",
    "memory_footprint",
    "mixed_decode_attention",
    "prefill_attention",
    "quantize",
    "reconstruct",
    "reference_attention",
    "run_single",
    "run_sweep",
    "segment_context",
    "serialize_block",
    "serialize_cache",
]
