"""Command line entry point.

Runs the pipeline on a JSON-lines corpus or on a synthetic workload, with
optional parameter sweeps, and writes a JSON or CSV report. Exit status:
0 on clean success, 2 on configuration errors, otherwise the number of
corpus lines skipped (capped at 99).
"""

import argparse
import sys

from chunkkv import harness


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chunkkv",
        description=(
            "Chunk-adaptive mixed-precision KV-cache engine: scores context "
            "chunks against the query, quantizes low-relevance chunks to 2 or "
            "4 bits, and decodes through blocked mixed-precision attention."
        ),
    )
    p.add_argument("--alpha", type=float, default=0.6,
                   help="INT2 threshold knob in [0,1] (default 0.6)")
    p.add_argument("--beta", type=float, default=0.1,
                   help="FP16 threshold knob in [0,1] (default 0.1)")
    p.add_argument("--chunk-size", type=int, default=32,
                   help="tokens per context chunk (default 32)")
    p.add_argument("--group-size", type=int, default=32,
                   help="elements per quantization group (default 32)")
    p.add_argument("--encoder", default="bow",
                   help="chunk/query encoder: bow, tfidf, or file:PATH "
                        "with precomputed embeddings (default bow)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--context-len", type=int, default=4096,
                   help="synthetic context length in tokens (default 4096)")
    p.add_argument("--decode-steps", type=int, default=128,
                   help="greedy decode steps per run (default 128)")
    p.add_argument("--corpus", metavar="PATH",
                   help="JSON-lines corpus {id, context, query}; omit for synthetic")
    p.add_argument("--sweep", metavar="SPEC",
                   help="grid sweep, e.g. 'alpha=0,0.25,0.5;beta=0.1' "
                        "(params: alpha, beta, chunk_size, group_size, "
                        "decode_steps, context_len)")
    p.add_argument("--out", metavar="PATH", help="report file (default stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json",
                   help="report format (default json)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = harness.RunConfig(
        alpha=args.alpha,
        beta=args.beta,
        chunk_size=args.chunk_size,
        group_size=args.group_size,
        encoder=args.encoder,
        seed=args.seed,
        context_len=args.context_len,
        decode_steps=args.decode_steps,
        corpus=args.corpus,
        sweep=args.sweep,
    )
    try:
        config.validate()
        if config.sweep:
            harness.parse_sweep(config.sweep)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    skipped = 0
    reports = []
    try:
        if config.corpus:
            entries, skipped = harness.load_corpus(config.corpus)
            if not entries:
                print(f"error: no usable records in {config.corpus}", file=sys.stderr)
                return 2
            for run_id, context, query in entries:
                if config.sweep:
                    reports.extend(harness.run_sweep(config, context, query, run_id=run_id))
                else:
                    reports.append(harness.run_single(config, context, query, run_id=run_id))
        else:
            if config.sweep:
                reports.extend(harness.run_sweep(config))
            else:
                reports.append(harness.run_single(config))
        harness.emit_report(reports, fmt=args.format, out=args.out)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return min(skipped, 99)


if __name__ == "__main__":
    sys.exit(main())
