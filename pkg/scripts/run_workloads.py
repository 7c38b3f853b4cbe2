#!/usr/bin/env python3
"""Multi-query workload experiment.

Generates (or reuses) a blob corpus, then runs filter workloads at
p_seen in {0.2, 0.5, 0.8, 1.0} under the indexed, incremental, and
full-scan engines. Emits one TSV of per-query rows per workload plus a
ratio-curve TSV (incremental / indexed cumulative time by query index).

Usage:
    python scripts/run_workloads.py --out results/ [--corpus DIR]
        [--count 600 --width 128 --height 128 --queries 200 --seed 7]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from chisearch.bench import WorkloadSpec, generate_workload, run_workload
from chisearch.chi import ChiConfig
from chisearch.corpus import generate_corpus
from chisearch.store import MaskStore, load_roi_table

P_SEEN_LEVELS = (0.2, 0.5, 0.8, 1.0)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--corpus", default=None, help="existing corpus dir (else generated)")
    ap.add_argument("--count", type=int, default=600)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--height", type=int, default=128)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--bins", type=int, default=16)
    ap.add_argument("--cell", type=int, default=16)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = Path(args.corpus) if args.corpus else out / "corpus"
    if not (corpus / "manifest.tsv").exists():
        print(f"generating corpus at {corpus} ...")
        generate_corpus(corpus, args.count, args.width, args.height, "blob", args.seed)

    store = MaskStore.open(corpus)
    rois = load_roi_table(corpus / "rois.tsv")
    config = ChiConfig(args.cell, args.cell, args.bins)

    ratio_rows = []
    for p_seen in P_SEEN_LEVELS:
        spec = WorkloadSpec(n_queries=args.queries, p_seen=p_seen, seed=args.seed)
        queries = generate_workload(spec, store, rois)
        report = run_workload(
            corpus, queries, ("indexed", "incremental", "oracle"), config=config
        )
        tag = f"pseen{int(p_seen * 100):03d}"
        report.write_tsv(out / f"workload_{tag}.tsv")
        report.write_json(out / f"workload_{tag}.json")
        ratios = report.summary["cumulative_ratio_incremental_vs_indexed"]
        ratio_rows.append((p_seen, ratios))
        totals = {m: round(s["total_s"], 3) for m, s in report.summary["modes"].items()}
        print(f"p_seen={p_seen}: totals {totals}, final ratio {ratios[-1]:.3f}")
    store.close()

    with open(out / "ratio_curves.tsv", "w") as fh:
        fh.write("query_index\t" + "\t".join(f"p_seen_{p}" for p, _ in ratio_rows) + "\n")
        n = min(len(r) for _, r in ratio_rows)
        for i in range(n):
            fh.write(
                "\t".join([str(i)] + [f"{r[i]:.4f}" for _, r in ratio_rows]) + "\n"
            )
    print(f"ratio curves -> {out / 'ratio_curves.tsv'}")


if __name__ == "__main__":
    main()
