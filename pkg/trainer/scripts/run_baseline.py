"""Opt-in end-to-end baseline experiment (slow; run manually).

Given a benchmark output directory that already contains exported
datasets (arithbench all), this script trains one model per requested
split, decodes candidates into <out>/candidates/, and leaves the
directory ready for `arithbench evaluate` / `arithbench analyze`.

Usage:
    python trainer/scripts/run_baseline.py --bench-out out \
        --splits diverse sem-extrap --max-epochs 20

Expected directional outcomes for a healthy setup (not asserted here,
check the harness reports): density splits should outscore support
extrapolation splits at equal compute, and pass@k should rise with
model size / training compute.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys


def run(cmd):
    print("+", " ".join(cmd), file=sys.stderr)
    subprocess.run(cmd, check=True)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--bench-out", required=True, help="arithbench output root")
    parser.add_argument("--splits", nargs="+", default=["diverse"])
    parser.add_argument("--d-model", type=int, default=128)
    parser.add_argument("--max-epochs", type=int, default=20)
    parser.add_argument("--n", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    data_dir = os.path.join(args.bench_out, "datasets")
    cand_dir = os.path.join(args.bench_out, "candidates")
    model_dir = os.path.join(args.bench_out, "models")
    os.makedirs(cand_dir, exist_ok=True)
    os.makedirs(model_dir, exist_ok=True)

    for split in args.splits:
        train_file = os.path.join(data_dir, f"{split}.train.jsonl")
        test_file = os.path.join(data_dir, f"{split}.test.jsonl")
        ckpt = os.path.join(model_dir, f"{split}.pt")
        run([
            "arithtrainer", "train",
            "--train", train_file, "--val", test_file, "--out", ckpt,
            "--d-model", str(args.d_model), "--max-epochs", str(args.max_epochs),
            "--seed", str(args.seed), "--model-id", f"{split}-d{args.d_model}",
        ])
        run([
            "arithtrainer", "generate",
            "--model", ckpt, "--tasks", test_file,
            "--out", os.path.join(cand_dir, f"{split}.seed{args.seed}.jsonl"),
            "--n", str(args.n), "--seed", str(args.seed),
        ])
    print(f"candidates written under {cand_dir}; now run: "
          f"arithbench evaluate && arithbench analyze", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
