"""Desk-scale run: generate FunnyBirds-lite, train, score explanations, write diagnostics.

    python3 scripts/desk_experiment.py --out runs/desk [--epochs 50] [--seed 0]
"""

import argparse
import json
import os
import time

from sic import funnybirds as fb
from sic.benchmark import SICAdapter, metric_suite
from sic.checkpoint import load_checkpoint
from sic.cli import run_training
from sic.config import RunConfig, format_config
from sic.explain import similarity_heatmap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--per-class", type=int, default=60)
    ap.add_argument("--test-per-class", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bench-limit", type=int, default=0, help="score only the first N test scenes")
    args = ap.parse_args()

    data_dir = os.path.join(args.out, "data")
    train_s, test_s = fb.generate_split(args.classes, args.per_class, args.test_per_class, args.seed)
    fb.save_scenes(data_dir, train_s + test_s)

    cfg = RunConfig(data_dir=data_dir, out_dir=args.out, epochs=args.epochs, seed=args.seed)
    with open(os.path.join(args.out, "run.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    report = run_training(cfg)
    print(f"test accuracy {report['test_accuracy']:.3f} after {report['seconds']:.0f}s")

    model, _ = load_checkpoint(report["checkpoint"])
    scenes = test_s[: args.bench_limit] if args.bench_limit else test_s
    t0 = time.perf_counter()
    metrics = metric_suite(SICAdapter(model), scenes, seed=args.seed).to_dict()
    heat = similarity_heatmap(model.supports)
    summary = {
        "train": report,
        "metrics": metrics,
        "bench_seconds": time.perf_counter() - t0,
        "support_similarity": {"intra_mean": heat.intra_mean, "inter_mean": heat.inter_mean, "silhouette": heat.silhouette},
    }
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(" ".join(f"{k}={v:.3f}" for k, v in metrics.items() if isinstance(v, float)))
    print(f"support similarity intra {heat.intra_mean:.3f} inter {heat.inter_mean:.3f} silhouette {heat.silhouette:.3f}")


if __name__ == "__main__":
    main()
