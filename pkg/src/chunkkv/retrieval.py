"""Chunk-level quantization search.

Segments the context into fixed-size chunks, embeds chunks and query with
a deterministic encoder, scores cosine similarity, derives the two
thresholds from the score range, and assigns each chunk a bitwidth tier.
"""

from dataclasses import dataclass
import hashlib
import json

import numpy as np

from chunkkv.tiers import Tier


@dataclass(frozen=True)
class ChunkSet:
    """Contiguous, non-overlapping token spans of one context.

    chunks holds the full spans (each exactly chunk_size tokens); tail is
    the trailing remainder shorter than one chunk, possibly empty. The
    tail never receives a similarity score and stays at full precision
    downstream.
    """

    chunks: tuple
    tail: tuple
    chunk_size: int

    @property
    def n(self) -> int:
        return len(self.chunks)

    @property
    def context_len(self) -> int:
        return self.n * self.chunk_size + len(self.tail)


def segment_context(tokens, chunk_size) -> ChunkSet:
    """Split tokens into floor(len/chunk_size) full chunks plus a tail."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("tokens must be non-empty")
    n = len(tokens) // chunk_size
    chunks = tuple(tokens[i * chunk_size : (i + 1) * chunk_size] for i in range(n))
    tail = tokens[n * chunk_size :]
    return ChunkSet(chunks=chunks, tail=tail, chunk_size=chunk_size)


@dataclass(frozen=True)
class Embedding:
    """Fixed-dimension vector with its cached L2 norm.

    norm == 0 flags an empty or out-of-vocabulary span; such embeddings
    are rejected by cosine_similarity and substituted by the caller.
    """

    vector: np.ndarray
    norm: float

    @classmethod
    def from_vector(cls, vector) -> "Embedding":
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        return cls(vector=v, norm=float(np.linalg.norm(v)))


class HashedBowEncoder:
    """Order-free hashed bag of words with a hash-derived sign, L2 normalized.

    Uses keyed blake2b so the bucket assignment is stable across processes
    and platforms (the builtin hash() is salted per process).
    """

    def __init__(self, dim=256, seed=0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self._key = str(int(seed)).encode("ascii")

    def fit(self, texts):
        pass  # stateless

    def encode(self, text) -> Embedding:
        vec = np.zeros(self.dim, dtype=np.float64)
        for word in text.split():
            digest = hashlib.blake2b(word.encode("utf-8"), key=self._key, digest_size=8)
            h = int.from_bytes(digest.digest(), "little")
            sign = -1.0 if h >> 63 else 1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec = vec / norm
            norm = 1.0
        return Embedding(vector=vec, norm=norm)


class TfidfEncoder:
    """TF-IDF over the texts of one run; vocabulary sorted for determinism.

    fit() must see every chunk plus the query before encode() is called.
    Smoothed idf: ln((1 + n_docs) / (1 + df)) + 1.
    """

    def __init__(self):
        self._index = None
        self._idf = None

    def fit(self, texts):
        texts = list(texts)
        vocab = sorted({w for t in texts for w in t.split()})
        self._index = {w: i for i, w in enumerate(vocab)}
        df = np.zeros(len(vocab), dtype=np.float64)
        for t in texts:
            for w in set(t.split()):
                df[self._index[w]] += 1.0
        self._idf = np.log((1.0 + len(texts)) / (1.0 + df)) + 1.0

    def encode(self, text) -> Embedding:
        if self._index is None:
            raise RuntimeError("TfidfEncoder.encode called before fit")
        vec = np.zeros(len(self._index), dtype=np.float64)
        for w in text.split():
            i = self._index.get(w)
            if i is not None:
                vec[i] += 1.0
        vec *= self._idf
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec = vec / norm
            norm = 1.0
        return Embedding(vector=vec, norm=norm)


class PrecomputedEncoder:
    """Vectors injected from a JSON-lines file, one {"id", "vector"} per line.

    encode() takes the record id, not the span text; the harness derives
    ids as "<run_id>/chunk/<i>" and "<run_id>/query". This is the hook for
    plugging in embeddings produced by real encoders offline.
    """

    def __init__(self, path):
        self.path = path
        self._vectors = {}
        dim = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    key = record["id"]
                    vec = np.asarray(record["vector"], dtype=np.float64).reshape(-1)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad embedding record: {exc}") from exc
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise ValueError(
                        f"{path}:{lineno}: vector dimension {vec.shape[0]} != {dim}"
                    )
                if key in self._vectors:
                    raise ValueError(f"{path}:{lineno}: duplicate id {key!r}")
                self._vectors[key] = vec
        if not self._vectors:
            raise ValueError(f"{path}: no embedding records")
        self.dim = dim

    def fit(self, texts):
        pass  # vectors are fixed

    def encode(self, key) -> Embedding:
        try:
            vec = self._vectors[key]
        except KeyError:
            raise KeyError(f"no precomputed embedding for id {key!r} in {self.path}") from None
        return Embedding.from_vector(vec)


def make_encoder(spec, seed=0):
    """Build an encoder from a CLI-style spec: bow, tfidf, or file:PATH."""
    if spec == "bow":
        return HashedBowEncoder(seed=seed)
    if spec == "tfidf":
        return TfidfEncoder()
    if spec.startswith("file:"):
        return PrecomputedEncoder(spec[len("file:") :])
    raise ValueError(f"unknown encoder {spec!r} (expected bow, tfidf, or file:PATH)")


def encode(text, encoder) -> Embedding:
    """Encode one span (or id, for the precomputed backend)."""
    return encoder.encode(text)


def cosine_similarity(q: Embedding, c: Embedding) -> float:
    if q.norm == 0.0 or c.norm == 0.0:
        raise ValueError("cosine similarity of a zero-norm embedding is undefined")
    return float(q.vector @ c.vector / (q.norm * c.norm))


def score_chunks(query: Embedding, chunk_embeddings) -> list:
    """Cosine score per chunk against the query.

    Zero-norm chunks score the minimum of the remaining chunks (least
    relevant, quantized aggressively); 0.0 if every chunk is zero-norm.
    A zero-norm query cannot be scored at all.
    """
    if query.norm == 0.0:
        raise ValueError("query embedding has zero norm")
    raw = [
        cosine_similarity(query, c) if c.norm > 0.0 else None for c in chunk_embeddings
    ]
    valid = [s for s in raw if s is not None]
    floor = min(valid) if valid else 0.0
    return [s if s is not None else floor for s in raw]


def compute_thresholds(scores, alpha, beta):
    """t_low = s_min + (s_max - s_min) * alpha; t_high = s_max - (s_max - s_min) * beta."""
    scores = list(scores)
    if not scores:
        raise ValueError("scores must be non-empty")
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError("alpha and beta must lie in [0, 1]")
    s_min = min(scores)
    s_max = max(scores)
    if alpha + beta > 1.0 and s_max > s_min:
        raise ValueError(
            f"alpha + beta = {alpha + beta} > 1 makes the thresholds cross"
        )
    t_low = s_min + (s_max - s_min) * alpha
    t_high = s_max - (s_max - s_min) * beta
    return t_low, t_high


def assign_tiers(scores, t_low, t_high) -> list:
    """Strict three-way rule; scores equal to a threshold fall to INT4."""
    tiers = []
    for s in scores:
        if s < t_low:
            tiers.append(Tier.INT2)
        elif s > t_high:
            tiers.append(Tier.FP16)
        else:
            tiers.append(Tier.INT4)
    return tiers


@dataclass(frozen=True)
class SimilarityReport:
    """Scores, thresholds and tier assignment for one (context, query) pair."""

    scores: tuple
    s_min: float
    s_max: float
    alpha: float
    beta: float
    t_low: float
    t_high: float
    tiers: tuple


def build_similarity_report(scores, alpha, beta) -> SimilarityReport:
    t_low, t_high = compute_thresholds(scores, alpha, beta)
    tiers = assign_tiers(scores, t_low, t_high)
    return SimilarityReport(
        scores=tuple(float(s) for s in scores),
        s_min=float(min(scores)),
        s_max=float(max(scores)),
        alpha=float(alpha),
        beta=float(beta),
        t_low=float(t_low),
        t_high=float(t_high),
        tiers=tuple(tiers),
    )
