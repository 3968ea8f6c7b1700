"""Few-shot comparison of ProtoFlow against the head-only GNN baseline.

    python3 scripts/fewshot.py --n 1 2 5 --seeds 0 1 2 --out runs/fewshot
"""
import argparse
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from protoflow.evalx import fewshot_benchmark, summarize, write_bench
from protoflow.graphs import FeatureSpec, GeneratorConfig, generate_synthetic
from protoflow.pipeline import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[1, 2, 5])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=42)
    ap.add_argument("--window", type=int, default=5)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--out", default="runs/fewshot")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(GeneratorConfig(seed=args.data_seed))
    spec = FeatureSpec.from_manifest(data.manifest)
    cfg = TrainConfig(k=args.k, window=args.window)
    with threadpool_limits(1):
        rows = fewshot_benchmark(data.videos, data.manifest, spec, cfg, args.n, args.seeds)
    write_bench(rows, out / "fewshot.csv")
    for s in summarize(rows):
        print(f"n={s['n']} {s['method']:<9} acc {s['accuracy']:.3f} +- {s['accuracy_std']:.3f}"
              f"  f1 {s['f1']:.3f} +- {s['f1_std']:.3f}")


if __name__ == "__main__":
    main()
