"""Run the multi-texture benchmark and write its report directory.

    python3 scripts/run_benchmark.py --out runs/bench [--config cfg.json] [--no-localize]

The optional JSON config mirrors BenchmarkConfig (sections dataset, pairs,
arch, train, bow, localization plus seed, k_max, k_fraction).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from groundret.benchmark import BenchmarkConfig, run_benchmark
from groundret.cli import _merge
from groundret.evalloc import emit_report


def summarize(outcome):
    lines = [f"pairs {outcome.n_pairs}  epochs {len(outcome.train_loss)}  "
             f"val |d-(1-o)| {outcome.val_abs_err[-1]:.3f}  train {outcome.seconds['train']:.0f}s"]
    for m in ("dml", "bow", "untrained", "random"):
        lines.append(f"{m:>9}: mean R0@k {outcome.mean_recall(m):.3f}  failures {outcome.total_failures(m)}")
    for t in outcome.textures:
        lines.append(f"{t.style:>9}: k={t.k} refs={t.n_refs} bow V={t.bow_choice.vocab_size} n={t.bow_choice.n}  "
                     + "  ".join(f"{m} {r.recall[0.0]:.3f}" for m, r in t.reports.items()))
    if outcome.textures and outcome.textures[0].localization:
        for s in ("none", "bow", "dml"):
            lines.append(f"localization {s:>4}: success {outcome.mean_success(s):.3f}  "
                         f"{1000 * outcome.mean_localization_seconds(s):.1f} ms/query")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--no-localize", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchmarkConfig()
    if args.config:
        cfg = _merge(cfg, json.loads(Path(args.config).read_text()), "")
    if args.seed is not None:
        cfg.seed = args.seed
    outcome = run_benchmark(cfg, localize=not args.no_localize)
    reports = [r for t in outcome.textures for r in t.reports.values()]
    summaries = [s for t in outcome.textures for s in t.localization.values()]
    emit_report(reports, summaries, args.out, {"seed": cfg.seed, "config": json.loads(json.dumps(cfg.to_dict()))})
    text = summarize(outcome)
    (Path(args.out) / "summary.txt").write_text(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
