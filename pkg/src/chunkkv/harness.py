"""End-to-end pipeline runner and report emission.

One run: tokenize (or synthesize) a context and query, score chunks,
assign tiers, prefill the toy model, build per-head caches, decode
greedily through the mixed-precision attention path, and compare against
an all-FP16 baseline decode of the same prompt. Reports are plain dicts
so they serialize to JSON (sorted keys) and CSV; everything volatile
lives under the "timing" key.
"""

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import statistics
import sys
import time

import numpy as np

from chunkkv import kernels, kv_store
from chunkkv.attention import prefill_attention
from chunkkv.kv_store import build_cache, memory_footprint
from chunkkv.retrieval import (
    PrecomputedEncoder,
    build_similarity_report,
    make_encoder,
    score_chunks,
    segment_context,
)
from chunkkv.tiers import Tier
from chunkkv.toy_model import ToyModel, generate

TIMING_NOTE = "wall-clock seconds on this host; not comparable across machines"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Pipeline settings; the defaults are the evaluated operating point."""

    alpha: float = 0.6
    beta: float = 0.1
    chunk_size: int = 32
    group_size: int = 32
    encoder: str = "bow"
    seed: int = 0
    context_len: int = 4096
    decode_steps: int = 128
    query_len: int = 16
    vocab_size: int = 512
    embed_dim: int = 64
    n_heads: int = 4
    corpus: str = None
    sweep: str = None

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.alpha + self.beta > 1.0:
            raise ValueError("alpha + beta must not exceed 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.decode_steps < 0:
            raise ValueError("decode_steps must be >= 0")
        if self.query_len < 1:
            raise ValueError("query_len must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")


def word_token_id(word, vocab_size) -> int:
    """Stable word -> token id hash, identical across processes."""
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def synth_workload(config: RunConfig):
    """Seeded synthetic (context, query) word lists with topical chunks.

    The context is built segment by segment (segment length = chunk_size),
    each segment drawing 70% of its words from one of four topic pools and
    30% from a shared pool; the query draws mostly from topic 0 plus some
    shared words. Chunks on the query's topic then score high, off-topic
    chunks score low but nonzero through the shared pool, so the tier rule
    has real spread to act on.
    """
    rng = np.random.default_rng(config.seed)
    vocab = [f"w{i:05d}" for i in range(config.vocab_size)]
    n_topics = 4
    pool = max(n_topics, config.vocab_size // 2)
    per_topic = max(1, pool // n_topics)
    topics = [vocab[t * per_topic : (t + 1) * per_topic] for t in range(n_topics)]
    common = vocab[n_topics * per_topic :] or vocab
    words = []
    seg = config.chunk_size
    n_segments = -(-config.context_len // seg)
    for s in range(n_segments):
        topic = topics[int(rng.integers(n_topics))]
        remaining = min(seg, config.context_len - s * seg)
        for _ in range(remaining):
            if rng.random() < 0.7:
                words.append(topic[int(rng.integers(len(topic)))])
            else:
                words.append(common[int(rng.integers(len(common)))])
    query = []
    for _ in range(config.query_len):
        if rng.random() < 0.75:
            query.append(topics[0][int(rng.integers(len(topics[0])))])
        else:
            query.append(common[int(rng.integers(len(common)))])
    return words, query


def _decode_run(model, k, v, first_logits, chunk_set, tiers, config):
    """Build per-head caches over the context, append the query tokens'
    K/V to the FP16 region, then decode greedily. Returns (caches, gen)."""
    ctx_len = chunk_set.context_len
    n_prefill = k.shape[0]
    d = model.head_dim
    caches = []
    for h in range(model.n_heads):
        cols = slice(h * d, (h + 1) * d)
        cache = build_cache(
            k[:ctx_len, cols], v[:ctx_len, cols], tiers, chunk_set, config.group_size
        )
        for r in range(ctx_len, n_prefill):
            kv_store.append_decode_token(cache, k[r, cols], v[r, cols])
        caches.append(cache)
    first_token = int(np.argmax(first_logits))
    gen = generate(model, caches, first_token, config.decode_steps, start_pos=n_prefill)
    return caches, first_token, gen


def _aggregate_memory(caches) -> dict:
    keys = ("int2_bytes", "int4_bytes", "fp16_bytes", "metadata_bytes",
            "fp16_baseline_bytes")
    reports = [memory_footprint(c) for c in caches]
    agg = {key: int(sum(getattr(r, key) for r in reports)) for key in keys}
    agg["total_bytes"] = (
        agg["int2_bytes"] + agg["int4_bytes"] + agg["fp16_bytes"] + agg["metadata_bytes"]
    )
    baseline = agg["fp16_baseline_bytes"]
    agg["compression_ratio"] = agg["total_bytes"] / baseline if baseline else 0.0
    return agg


def run_single(config: RunConfig, context=None, query=None, run_id=None) -> dict:
    """Full pipeline for one (context, query) pair; returns a report dict.

    context/query are whitespace-tokenized strings; both None means a
    synthetic workload from the config's seed and context_len.
    """
    config.validate()
    wall0 = time.perf_counter()
    if context is None:
        context_words, query_words = synth_workload(config)
        source = "synthetic"
        run_id = run_id if run_id is not None else f"synthetic-{config.seed}"
    else:
        context_words = context.split()
        query_words = (query or "").split()
        source = "corpus"
        run_id = run_id if run_id is not None else "run"
    if not context_words:
        raise ValueError(f"{run_id}: empty context")
    if not query_words:
        raise ValueError(f"{run_id}: empty query")

    chunk_set = segment_context(context_words, config.chunk_size)

    encoder = make_encoder(config.encoder, seed=config.seed)
    if isinstance(encoder, PrecomputedEncoder):
        chunk_inputs = [f"{run_id}/chunk/{i}" for i in range(chunk_set.n)]
        query_input = f"{run_id}/query"
    else:
        chunk_inputs = [" ".join(c) for c in chunk_set.chunks]
        query_input = " ".join(query_words)
    encoder.fit(chunk_inputs + [query_input])
    chunk_embeddings = [encoder.encode(x) for x in chunk_inputs]
    query_embedding = encoder.encode(query_input)

    if chunk_set.n > 0:
        scores = score_chunks(query_embedding, chunk_embeddings)
        sim = build_similarity_report(scores, config.alpha, config.beta)
        tiers = list(sim.tiers)
        similarity = {
            "scores": [float(s) for s in sim.scores],
            "s_min": sim.s_min,
            "s_max": sim.s_max,
            "t_low": sim.t_low,
            "t_high": sim.t_high,
            "tiers": [t.value for t in sim.tiers],
        }
    else:
        # context shorter than one chunk: everything rides in the FP16 tail
        tiers = []
        similarity = None

    model = ToyModel(
        vocab_size=config.vocab_size,
        embed_dim=config.embed_dim,
        n_heads=config.n_heads,
        seed=config.seed,
    )
    token_ids = [word_token_id(w, config.vocab_size) for w in context_words + query_words]
    prefill0 = time.perf_counter()
    emb = model.embed(token_ids)
    k, v, first_logits = prefill_attention(emb, model)
    prefill_seconds = time.perf_counter() - prefill0

    caches, first_token, gen = _decode_run(
        model, k, v, first_logits, chunk_set, tiers, config
    )
    baseline_tiers = [Tier.FP16] * chunk_set.n
    _, _, base = _decode_run(
        model, k, v, first_logits, chunk_set, baseline_tiers, config
    )

    divergence = None
    for i, (a, b) in enumerate(zip(gen.tokens, base.tokens)):
        if a != b:
            divergence = i
            break
    if gen.final_hidden is not None:
        hm = gen.final_hidden
        hb = base.final_hidden
        denom = float(np.linalg.norm(hm) * np.linalg.norm(hb))
        cosine_distance = 1.0 - float(hm @ hb) / denom if denom > 0.0 else 0.0
        max_abs_distance = float(np.max(np.abs(hm - hb)))
    else:
        cosine_distance = None
        max_abs_distance = None

    n = chunk_set.n
    counts = {t.value: sum(1 for x in tiers if x is t) for t in Tier}
    fractions = {key: (val / n if n else 0.0) for key, val in counts.items()}

    return {
        "schema": "chunkkv-run-v1",
        "run_id": run_id,
        "backend": kernels.BACKEND,
        "config": {
            "alpha": config.alpha,
            "beta": config.beta,
            "chunk_size": config.chunk_size,
            "group_size": config.group_size,
            "encoder": config.encoder,
            "seed": config.seed,
            "context_len": config.context_len,
            "decode_steps": config.decode_steps,
            "query_len": config.query_len,
            "vocab_size": config.vocab_size,
            "embed_dim": config.embed_dim,
            "n_heads": config.n_heads,
            "head_dim": config.head_dim,
        },
        "workload": {
            "source": source,
            "context_tokens": len(context_words),
            "query_tokens": len(query_words),
            "n_chunks": n,
            "tail_len": len(chunk_set.tail),
        },
        "similarity": similarity,
        "tier_counts": counts,
        "tier_fractions": fractions,
        "memory": _aggregate_memory(caches),
        "output": {
            "first_token": first_token,
            "tokens": list(gen.tokens),
            "baseline_tokens": list(base.tokens),
            "token_divergence_step": divergence,
            "cosine_distance_to_fp16": cosine_distance,
            "max_abs_distance_to_fp16": max_abs_distance,
        },
        "timing": {
            "prefill_seconds": prefill_seconds,
            "decode_step_seconds_median": (
                statistics.median(gen.step_seconds) if gen.step_seconds else None
            ),
            "decode_step_seconds_mean": (
                statistics.fmean(gen.step_seconds) if gen.step_seconds else None
            ),
            "total_seconds": time.perf_counter() - wall0,
            "note": TIMING_NOTE,
        },
    }


_SWEEP_PARAMS = {
    "alpha": float,
    "beta": float,
    "chunk_size": int,
    "group_size": int,
    "decode_steps": int,
    "context_len": int,
}


def parse_sweep(spec) -> list:
    """Parse "alpha=0,0.25,0.5;beta=0.1" into override dicts (cross product)."""
    grids = []
    seen = set()
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        name, eq, values = part.partition("=")
        name = name.strip()
        if not eq or name not in _SWEEP_PARAMS:
            raise ValueError(
                f"bad sweep term {part!r}; expected one of {sorted(_SWEEP_PARAMS)}=v1,v2,..."
            )
        if name in seen:
            raise ValueError(f"sweep parameter {name!r} given twice")
        seen.add(name)
        conv = _SWEEP_PARAMS[name]
        try:
            parsed = [conv(x) for x in values.split(",") if x.strip()]
        except ValueError as exc:
            raise ValueError(f"bad sweep values for {name!r}: {exc}") from exc
        if not parsed:
            raise ValueError(f"sweep parameter {name!r} has no values")
        grids.append((name, parsed))
    if not grids:
        raise ValueError("empty sweep spec")
    names = [g[0] for g in grids]
    return [dict(zip(names, combo)) for combo in itertools.product(*(g[1] for g in grids))]


def run_sweep(config: RunConfig, context=None, query=None, run_id=None) -> list:
    """run_single once per sweep grid point; run ids carry the overrides."""
    if not config.sweep:
        raise ValueError("config.sweep is empty")
    overrides = parse_sweep(config.sweep)
    base_id = run_id if run_id is not None else (
        f"synthetic-{config.seed}" if context is None else "run"
    )
    reports = []
    for ov in overrides:
        sub = dataclasses.replace(config, sweep=None, **ov)
        sub.validate()
        label = ",".join(f"{key}={ov[key]}" for key in sorted(ov))
        reports.append(run_single(sub, context, query, run_id=f"{base_id}#{label}"))
    return reports


def load_corpus(path):
    """Read JSON-lines records {id?, context, query}.

    Malformed lines are skipped with a warning on stderr; the number of
    skips is returned so the CLI can reflect it in its exit code.
    """
    entries = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                context = record["context"]
                query = record["query"]
                if not isinstance(context, str) or not isinstance(query, str):
                    raise TypeError("context and query must be strings")
                run_id = str(record.get("id", f"line{lineno}"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                print(f"warning: {path}:{lineno}: skipping record: {exc}", file=sys.stderr)
                skipped += 1
                continue
            entries.append((run_id, context, query))
    return entries, skipped


_CSV_COLUMNS = [
    "run_id", "backend", "seed", "alpha", "beta", "chunk_size", "group_size",
    "encoder", "context_tokens", "query_tokens", "decode_steps", "n_chunks",
    "tail_len", "frac_int2", "frac_int4", "frac_fp16", "int2_bytes",
    "int4_bytes", "fp16_bytes", "metadata_bytes", "total_bytes",
    "fp16_baseline_bytes", "compression_ratio", "t_low", "t_high",
    "token_divergence_step", "cosine_distance_to_fp16", "max_abs_distance_to_fp16",
]


def _csv_row(report) -> dict:
    sim = report["similarity"] or {}
    return {
        "run_id": report["run_id"],
        "backend": report["backend"],
        "seed": report["config"]["seed"],
        "alpha": report["config"]["alpha"],
        "beta": report["config"]["beta"],
        "chunk_size": report["config"]["chunk_size"],
        "group_size": report["config"]["group_size"],
        "encoder": report["config"]["encoder"],
        "context_tokens": report["workload"]["context_tokens"],
        "query_tokens": report["workload"]["query_tokens"],
        "decode_steps": report["config"]["decode_steps"],
        "n_chunks": report["workload"]["n_chunks"],
        "tail_len": report["workload"]["tail_len"],
        "frac_int2": report["tier_fractions"]["int2"],
        "frac_int4": report["tier_fractions"]["int4"],
        "frac_fp16": report["tier_fractions"]["fp16"],
        "int2_bytes": report["memory"]["int2_bytes"],
        "int4_bytes": report["memory"]["int4_bytes"],
        "fp16_bytes": report["memory"]["fp16_bytes"],
        "metadata_bytes": report["memory"]["metadata_bytes"],
        "total_bytes": report["memory"]["total_bytes"],
        "fp16_baseline_bytes": report["memory"]["fp16_baseline_bytes"],
        "compression_ratio": report["memory"]["compression_ratio"],
        "t_low": sim.get("t_low", ""),
        "t_high": sim.get("t_high", ""),
        "token_divergence_step": report["output"]["token_divergence_step"],
        "cosine_distance_to_fp16": report["output"]["cosine_distance_to_fp16"],
        "max_abs_distance_to_fp16": report["output"]["max_abs_distance_to_fp16"],
    }


def render_report(reports, fmt="json") -> str:
    """Reports as a JSON document or a flat CSV table.

    Runs are sorted by run id so the output does not depend on the order
    in which they were produced.
    """
    reports = sorted(reports, key=lambda r: r["run_id"])
    if fmt == "json":
        payload = {"schema": "chunkkv-report-v1", "runs": reports}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            row = _csv_row(report)
            writer.writerow({key: ("" if row[key] is None else row[key]) for key in _CSV_COLUMNS})
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(reports, fmt="json", out=None) -> str:
    """Write reports to `out` (or stdout) and return the rendered text."""
    text = render_report(reports, fmt)
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
