"""Acceptance gate for the engine.

Eight end-to-end checks, one test each, printing a single
"ACCEPTANCE <n> <name>: PASS|FAIL" line per criterion so the verdicts
survive in terminal output even under -q. Tolerances are pinned here and
are not to be loosened to make a failing criterion pass.
"""

import json
import subprocess
import sys
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from chunkkv import kernels, quantizer
from chunkkv.attention import AttentionInstance, mixed_decode_attention, prefill_attention, reference_attention
from chunkkv.kernels import BACKEND
from chunkkv.kv_store import (
    build_cache,
    deserialize_cache,
    memory_footprint,
    reconstruct,
    serialize_cache,
)
from chunkkv.retrieval import assign_tiers, compute_thresholds, segment_context
from chunkkv.tiers import Tier
from chunkkv.toy_model import ToyModel, generate


@contextmanager
def criterion(num, name, capsys):
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"\nACCEPTANCE {num} {name}: FAIL")
        raise
    with capsys.disabled():
        print(f"\nACCEPTANCE {num} {name}: PASS")


def rel_err(got, want):
    scale = float(np.max(np.abs(want)))
    return float(np.max(np.abs(got - want))) / max(scale, 1e-300)


def test_acceptance_1_blocking_equivalence(capsys):
    # mixed blocked attention vs naive attention over the dequantized,
    # order-restored cache: <= 1e-5 relative, <= 1e-6 when nothing is
    # quantized, 100+ random instances inside 30 s
    with criterion(1, "blocking-equivalence", capsys):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst_mixed = worst_fp = 0.0
        n_fp = 0
        for i in range(100):
            tokens = int(rng.integers(32, 513))
            head_dim = int(rng.choice([16, 64]))
            cs = int(rng.choice([8, 16, 32]))
            gs = int(rng.choice([8, 16, 32]))
            k = rng.normal(size=(tokens, head_dim))
            v = rng.normal(size=(tokens, head_dim))
            chunk_set = segment_context(list(range(tokens)), cs)
            all_fp = i % 5 == 0
            if all_fp:
                tiers = [Tier.FP16] * chunk_set.n
                n_fp += 1
            else:
                tiers = [Tier(rng.choice(["int2", "int4", "fp16"]))
                         for _ in range(chunk_set.n)]
            cache = build_cache(k, v, tiers, chunk_set, gs)
            for _ in range(int(rng.integers(0, 3))):
                cache.append(rng.normal(size=head_dim), rng.normal(size=head_dim))
            q = rng.normal(size=(int(rng.integers(1, 3)), head_dim))
            got = mixed_decode_attention(AttentionInstance(q, cache))
            want = reference_attention(q, *reconstruct(cache))
            err = rel_err(got, want)
            if all_fp:
                worst_fp = max(worst_fp, err)
            else:
                worst_mixed = max(worst_mixed, err)
        elapsed = time.perf_counter() - t0
        assert worst_mixed <= 1e-5, f"mixed rel err {worst_mixed}"
        assert worst_fp <= 1e-6, f"all-fp16 rel err {worst_fp}"
        assert n_fp >= 20
        assert elapsed < 30.0, f"took {elapsed:.1f}s"


def test_acceptance_2_quantization_bound(capsys):
    # per-group error bound scale/2 = (M - m) / (2 (2^b - 1)), zero
    # violations over 10^4 groups per bitwidth; grid values exact
    with criterion(2, "quantization-bound", capsys):
        rng = np.random.default_rng(7)
        gs = 8
        for bits in (2, 4):
            qmax = (1 << bits) - 1
            x = rng.normal(size=(100, 100 * gs)) * rng.uniform(0.01, 10.0, size=(100, 1))
            x[:5] = 2.5  # constant groups must reproduce exactly
            codes, scales, zps = kernels.quantize_groups(x, bits, gs)
            assert scales.size == 10_000
            deq = kernels.dequantize_codes(
                kernels.pack_codes(codes, bits), scales, zps, 100, 100 * gs, bits, gs)
            bound = np.repeat(scales.reshape(100, -1), gs, axis=1) / 2.0
            violations = int(np.sum(np.abs(x - deq) > bound))
            assert violations == 0, f"{violations} violations at {bits} bits"
            assert np.array_equal(deq[:5], x[:5])
            # grid-aligned inputs round-trip bit for bit
            step = 2.0 / qmax
            grid_codes = rng.integers(0, qmax + 1, size=(40, 16 * gs))
            grid_codes[:, ::gs] = 0
            grid_codes[:, 1::gs] = qmax
            g = -1.0 + step * grid_codes
            block = quantizer.quantize(g, bits, gs)
            assert np.array_equal(quantizer.dequantize(block), g)


def test_acceptance_3_threshold_semantics(capsys):
    with criterion(3, "threshold-semantics", capsys):
        t_low, t_high = compute_thresholds([0.1, 0.5, 0.9], 0.5, 0.25)
        assert t_low == 0.5 and t_high == 0.7
        assert assign_tiers([0.1, 0.5, 0.9], t_low, t_high) == [
            Tier.INT2, Tier.INT4, Tier.FP16]
        # alpha = beta = 0: both thresholds hit the extremes, strict
        # comparisons leave everything at INT4
        lo, hi = compute_thresholds([0.2, 0.5, 0.8], 0.0, 0.0)
        assert (lo, hi) == (0.2, 0.8)
        assert assign_tiers([0.2, 0.5, 0.8], lo, hi) == [Tier.INT4] * 3
        lo, hi = compute_thresholds([0.4, 0.4, 0.4], 0.7, 0.2)
        assert lo == hi == 0.4
        assert assign_tiers([0.4, 0.4, 0.4], lo, hi) == [Tier.INT4] * 3
        with pytest.raises(ValueError):
            compute_thresholds([0.1, 0.9], 0.8, 0.5)  # crossing thresholds


def test_acceptance_4_memory_arithmetic(capsys):
    # packed-bytes ratio == (2 f2 + 4 f4 + 16 f16) / 16 exactly, with
    # metadata accounted in closed form from group counts
    with criterion(4, "memory-arithmetic", capsys):
        rng = np.random.default_rng(11)
        tokens, d = 4096, 64
        cs = gs = 64
        n = tokens // cs
        k = rng.normal(size=(tokens, d))
        v = rng.normal(size=(tokens, d))
        chunk_set = segment_context(list(range(tokens)), cs)
        baseline = 2 * 2 * tokens * d
        mixtures = [(n, 0, 0), (0, n, 0), (0, 0, n)]
        while len(mixtures) < 13:
            c2, c4 = rng.multinomial(n, [1 / 3] * 3)[:2]
            mixtures.append((int(c2), int(c4), n - int(c2) - int(c4)))
        for c2, c4, c16 in mixtures:
            tiers = [Tier.INT2] * c2 + [Tier.INT4] * c4 + [Tier.FP16] * c16
            rng.shuffle(tiers)
            cache = build_cache(k, v, tiers, chunk_set, gs)
            rep = memory_footprint(cache)
            groups = (cache.k_q2.n_groups + cache.v_q2.n_groups
                      + cache.k_q4.n_groups + cache.v_q4.n_groups)
            packed_only = (rep.int2_bytes + rep.int4_bytes + rep.fp16_bytes
                           - 16 * groups)
            t2, t4, t16 = c2 * cs, c4 * cs, c16 * cs
            ideal = Fraction(2 * t2 + 4 * t4 + 16 * t16, 16 * tokens)
            assert Fraction(packed_only, baseline) == ideal
            # one float64 scale + zero point per group, 8 + 4 n header
            assert rep.total_bytes == packed_only + 16 * groups + 32 + 4 * n
            assert rep.metadata_bytes == 32 + 4 * n
            assert groups == 2 * (t2 + t4)  # group_size == head_dim
            assert rep.compression_ratio == rep.total_bytes / baseline


def test_acceptance_5_monotone_degradation(capsys):
    # promoting chunks INT2 -> INT4 -> FP16 never hurts fidelity on
    # average: distance to the FP16 baseline trends down over the ladder
    with criterion(5, "monotone-degradation", capsys):
        n_chunks, cs, ctx, steps = 8, 32, 256, 4

        def ladder(level):
            tiers = [Tier.INT2] * n_chunks
            for i in range(min(level, n_chunks)):
                tiers[i] = Tier.INT4
            for i in range(max(0, level - n_chunks)):
                tiers[i] = Tier.FP16
            return tiers

        def final_hidden(model, k, v, logits, chunk_set, tiers):
            d = model.head_dim
            caches = [
                build_cache(k[:, h * d:(h + 1) * d], v[:, h * d:(h + 1) * d],
                            tiers, chunk_set, 16)
                for h in range(model.n_heads)
            ]
            gen = generate(model, caches, int(np.argmax(logits)), steps, start_pos=ctx)
            return gen.final_hidden

        levels = list(range(2 * n_chunks + 1))
        dists = np.zeros((20, len(levels)))
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            model = ToyModel(vocab_size=128, embed_dim=32, n_heads=2, seed=seed)
            tokens = rng.integers(0, 128, size=ctx).tolist()
            emb = model.embed(tokens)
            k, v, logits = prefill_attention(emb, model)
            chunk_set = segment_context(tokens, cs)
            hb = final_hidden(model, k, v, logits, chunk_set, [Tier.FP16] * n_chunks)
            nb = np.linalg.norm(hb)
            for level in levels:
                hm = final_hidden(model, k, v, logits, chunk_set, ladder(level))
                dists[seed, level] = 1.0 - float(hm @ hb) / (float(np.linalg.norm(hm)) * nb)
        means = dists.mean(axis=0)
        rho, p = stats.spearmanr(levels, means)
        assert rho < 0, f"rho={rho}"
        assert p < 0.05, f"p={p}"
        assert means[0] == max(means)
        assert abs(means[-1]) <= 1e-12  # full ladder ends at the baseline


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "chunkkv", *args],
        cwd=cwd, capture_output=True, text=True, timeout=300)


def test_acceptance_6_pipeline_determinism(tmp_path, capsys):
    # identical config + corpus + seed => byte-identical reports once the
    # wall-clock timing section is dropped; CSV has no timing at all
    with criterion(6, "pipeline-determinism", capsys):
        corpus = tmp_path / "corpus.jsonl"
        words = " ".join(f"w{i % 11}" for i in range(96))
        corpus.write_text(
            json.dumps({"id": "a", "context": words, "query": "w1 w2 w3"}) + "\n"
            + json.dumps({"id": "b", "context": words.upper(), "query": "W4"}) + "\n",
            encoding="utf-8")
        flags = ["--chunk-size", "16", "--decode-steps", "4", "--seed", "3",
                 "--corpus", str(corpus), "--sweep", "alpha=0.3,0.6"]
        docs = []
        for name in ("r1.json", "r2.json"):
            out = tmp_path / name
            proc = run_cli(flags + ["--out", str(out)], tmp_path)
            assert proc.returncode == 0, proc.stderr
            docs.append(json.loads(out.read_text(encoding="utf-8")))
        for doc in docs:
            for run in doc["runs"]:
                run.pop("timing")
        assert json.dumps(docs[0], sort_keys=True) == json.dumps(docs[1], sort_keys=True)

        raws = []
        for name in ("r1.csv", "r2.csv"):
            out = tmp_path / name
            proc = run_cli(flags + ["--format", "csv", "--out", str(out)], tmp_path)
            assert proc.returncode == 0, proc.stderr
            raws.append(out.read_bytes())
        assert raws[0] == raws[1]


def test_acceptance_7_serialization_round_trip(capsys):
    with criterion(7, "serialization-round-trip", capsys):
        rng = np.random.default_rng(99)
        for i in range(100):
            rows = int(rng.integers(0, 41)) if i % 10 else 0
            cols = int(rng.integers(1, 71))
            bits = int(rng.choice([2, 4]))
            gs = int(rng.integers(1, cols + 4))
            block = quantizer.quantize(rng.normal(size=(rows, cols)) * 3, bits, gs)
            raw = quantizer.serialize_block(block)
            back, end = quantizer.deserialize_block(raw)
            assert end == len(raw)
            assert (back.rows, back.cols, back.bitwidth, back.group_size) == \
                (block.rows, block.cols, block.bitwidth, block.group_size)
            assert np.array_equal(back.packed, block.packed)
            assert np.array_equal(back.scales.view(np.uint64), block.scales.view(np.uint64))
            assert np.array_equal(back.zero_points.view(np.uint64),
                                  block.zero_points.view(np.uint64))
            assert quantizer.serialize_block(back) == raw
        for i in range(100):
            n = int(rng.integers(0, 7))
            cs = int(rng.integers(1, 10))
            hd = int(rng.choice([4, 8, 16]))
            gs = int(rng.choice([4, 8]))
            tail = int(rng.integers(0, cs))
            if n == 0 and tail == 0:
                n = 1
            total = n * cs + tail
            tiers = [Tier(rng.choice(["int2", "int4", "fp16"])) for _ in range(n)]
            k = rng.normal(size=(total, hd))
            v = rng.normal(size=(total, hd))
            cache = build_cache(k, v, tiers, segment_context(list(range(total)), cs), gs)
            for _ in range(int(rng.integers(0, 4))):
                cache.append(rng.normal(size=hd), rng.normal(size=hd))
            raw = serialize_cache(cache)
            back = deserialize_cache(raw)
            assert serialize_cache(back) == raw
            assert back.tiers == tiers
            assert np.array_equal(back.perm, cache.perm)
            assert np.array_equal(back.k_fp.view(np.uint64), cache.k_fp.view(np.uint64))
            assert np.array_equal(back.v_fp.view(np.uint64), cache.v_fp.view(np.uint64))
            k_a, v_a = reconstruct(cache)
            k_b, v_b = reconstruct(back)
            assert np.array_equal(k_a.view(np.uint64), k_b.view(np.uint64))
            assert np.array_equal(v_a.view(np.uint64), v_b.view(np.uint64))


def test_acceptance_8_defaults_conformance(tmp_path, capsys):
    # bare CLI: default knobs, 4096-token synthetic context, < 60 s
    with criterion(8, "defaults-conformance", capsys):
        out = tmp_path / "default.json"
        t0 = time.perf_counter()
        proc = run_cli(["--out", str(out)], tmp_path)
        elapsed = time.perf_counter() - t0
        assert proc.returncode == 0, proc.stderr
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        run = json.loads(out.read_text(encoding="utf-8"))["runs"][0]
        cfg = run["config"]
        assert cfg["alpha"] == 0.6 and cfg["beta"] == 0.1
        assert cfg["chunk_size"] == 32 and cfg["decode_steps"] == 128
        assert cfg["context_len"] == 4096 and cfg["group_size"] == 32
        assert run["workload"]["context_tokens"] == 4096
        assert run["workload"]["n_chunks"] == 128
        assert len(run["output"]["tokens"]) == 128
        assert run["backend"] == BACKEND
        assert sum(run["tier_counts"].values()) == 128
        assert 0 < run["memory"]["compression_ratio"] < 1.0
