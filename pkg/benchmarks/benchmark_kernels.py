"""Compare the numba kernels against the pure-numpy fallback.

Runs the same workloads under both backends in subprocesses (the
backend is chosen at import time via ARITHBENCH_BACKEND) and reports
wall times plus a bit-exactness cross-check on the outputs.

Usage: python benchmarks/benchmark_kernels.py [--max-ops 4] [--grid 256]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from arithbench import kernels
from arithbench.grammar import CODE_PAD, build_level_tables, token_width
from arithbench.evaluator import canonicalize_outputs, make_grid

max_ops, grid_size, out_path = int(sys.argv[1]), int(sys.argv[2]), sys.argv[3]
levels = build_level_tables(max_ops)
n = sum(len(lv) for lv in levels)
codes = np.full((n, token_width(max_ops)), CODE_PAD, dtype=np.uint8)
row = 0
for lv in levels:
    codes[row : row + len(lv), : lv.codes.shape[1]] = lv.codes
    row += len(lv)
lengths = np.concatenate([lv.lengths for lv in levels])
sources = np.concatenate([lv.sources.astype(f"S{6 * max_ops + 1}") for lv in levels])
grid = make_grid(grid_size)

results = {"backend": kernels.BACKEND, "programs": int(len(lengths))}
digests = {}

basis = np.random.Generator(np.random.Philox(key=1)).standard_normal(
    (65536, 32)).astype(np.float32)
xs = np.random.Generator(np.random.Philox(key=2)).random(
    (256, 4096), dtype=np.float32) * 20 - 10

# warm-up so numba timings exclude jit compilation
kernels.eval_grid_batch(codes[:8], lengths[:8], grid)
kernels.syn_project_batch(codes[:8], lengths[:8], basis, 7)
kernels.parse_sources_batch(sources[:8])
kernels.eval_rows_batch(codes[:8], lengths[:8], xs[:8])

t0 = time.perf_counter(); raw = kernels.eval_grid_batch(codes, lengths, grid)
results["eval_grid_s"] = time.perf_counter() - t0
v, m = canonicalize_outputs(raw)  # NaN payload bits are not semantics
digests["eval_grid"] = hashlib.sha256(v.tobytes() + m.tobytes()).hexdigest()

t0 = time.perf_counter(); proj = kernels.syn_project_batch(codes, lengths, basis, 7)
results["syn_project_s"] = time.perf_counter() - t0
digests["syn_project"] = hashlib.sha256(proj.tobytes()).hexdigest()

t0 = time.perf_counter(); parsed, plen = kernels.parse_sources_batch(sources)
results["parse_s"] = time.perf_counter() - t0
digests["parse"] = hashlib.sha256(parsed.tobytes() + plen.tobytes()).hexdigest()

t0 = time.perf_counter(); rows = kernels.eval_rows_batch(codes[:256], lengths[:256], xs)
results["eval_rows_s"] = time.perf_counter() - t0
v, m = canonicalize_outputs(rows)
digests["eval_rows"] = hashlib.sha256(v.tobytes() + m.tobytes()).hexdigest()

results["digests"] = digests
with open(out_path, "w") as fh:
    json.dump(results, fh)
"""


def run_backend(backend: str, max_ops: int, grid: int) -> dict:
    with tempfile.NamedTemporaryFile(suffix=".json", delete=False) as tf:
        out_path = tf.name
    env = dict(os.environ, ARITHBENCH_BACKEND=backend)
    subprocess.run(
        [sys.executable, "-c", WORKER, str(max_ops), str(grid), out_path],
        env=env, check=True,
    )
    with open(out_path) as fh:
        result = json.load(fh)
    os.unlink(out_path)
    return result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--max-ops", type=int, default=4)
    parser.add_argument("--grid", type=int, default=256)
    args = parser.parse_args()

    print(f"workload: all programs up to {args.max_ops} ops, {args.grid}-pt grid")
    runs = {b: run_backend(b, args.max_ops, args.grid) for b in ("numpy", "numba")}
    names = [k for k in runs["numpy"] if k.endswith("_s")]
    print(f"{'kernel':<16} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name in names:
        a, b = runs["numpy"][name], runs["numba"][name]
        print(f"{name[:-2]:<16} {a:>9.3f}s {b:>9.3f}s {a / b:>7.1f}x")
    match = runs["numpy"]["digests"] == runs["numba"]["digests"]
    print(f"outputs bit-identical across backends: {match}")
    return 0 if match else 1


if __name__ == "__main__":
    sys.exit(main())
