"""Test accuracy of ProtoFlow as a function of the temporal window size.

    python3 scripts/window_sweep.py --windows 1 5 10 --seeds 0 1 2
"""
import argparse
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from protoflow.evalx import SWEEP_WINDOWS, summarize, window_sweep, write_sweep
from protoflow.graphs import FeatureSpec, GeneratorConfig, generate_synthetic
from protoflow.pipeline import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", type=int, nargs="+", default=list(SWEEP_WINDOWS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--data-seed", type=int, default=42)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--out", default="runs/window_sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(GeneratorConfig(seed=args.data_seed))
    spec = FeatureSpec.from_manifest(data.manifest)
    with threadpool_limits(1):
        rows = window_sweep(data.videos, data.manifest, spec, TrainConfig(k=args.k), args.windows, args.seeds)
    write_sweep(rows, out / "sweep.csv")
    for s in summarize(rows, key=("n",)):
        print(f"w={s['n']:>3} acc {s['accuracy']:.3f} +- {s['accuracy_std']:.3f}  f1 {s['f1']:.3f}")


if __name__ == "__main__":
    main()
