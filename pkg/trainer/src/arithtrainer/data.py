"""Task-file loading and batch assembly.

Reads the benchmark's JSON-lines task format: one object per line with
"task_id", "source" (ground-truth program text), and "spec" (a list of
[x, y] float pairs).  Specs are normalized per feature with arcsinh,
which keeps the huge dynamic range of exp/log outputs in a usable band
without losing sign or order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .vocab import BOS, EOS, PAD, Vocab


@dataclass
class TaskExample:
    task_id: int
    source: str
    spec: np.ndarray  # (P, 2) float32 [x, y] pairs


def load_tasks(path, max_pairs: int | None = None) -> list[TaskExample]:
    tasks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                spec = np.asarray(obj["spec"], dtype=np.float32)
                if spec.ndim != 2 or spec.shape[1] != 2:
                    raise ValueError("spec must be [x, y] pairs")
                if max_pairs is not None:
                    spec = spec[:max_pairs]
                tasks.append(TaskExample(int(obj["task_id"]), obj["source"], spec))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad task line: {exc}") from exc
    if not tasks:
        raise ValueError(f"{path}: no tasks")
    return tasks


def normalize_spec(spec: np.ndarray) -> np.ndarray:
    """arcsinh compresses |y| up to float32 range into roughly [-90, 90]."""
    return np.arcsinh(spec.astype(np.float64)).astype(np.float32)


def encode_specs(tasks: list[TaskExample], n_pairs: int) -> torch.Tensor:
    """(B, n_pairs, 2) normalized spec tensor; specs are truncated or
    cyclically padded to a fixed pair count."""
    out = np.empty((len(tasks), n_pairs, 2), dtype=np.float32)
    for b, t in enumerate(tasks):
        spec = normalize_spec(t.spec)
        if len(spec) >= n_pairs:
            out[b] = spec[:n_pairs]
        else:
            reps = -(-n_pairs // len(spec))
            out[b] = np.tile(spec, (reps, 1))[:n_pairs]
    return torch.from_numpy(out)


def encode_targets(tasks: list[TaskExample], vocab: Vocab, max_len: int) -> torch.Tensor:
    """(B, max_len+1) int64: BOS + chars + EOS, PAD-filled."""
    ids = torch.full((len(tasks), max_len + 1), PAD, dtype=torch.int64)
    for b, t in enumerate(tasks):
        toks = [BOS] + vocab.encode(t.source) + [EOS]
        if len(toks) > max_len + 1:
            raise ValueError(
                f"task {t.task_id}: program length {len(t.source)} exceeds "
                f"max_len {max_len - 1}"
            )
        ids[b, : len(toks)] = torch.tensor(toks)
    return ids


def batches(n: int, batch_size: int, generator: torch.Generator):
    """Shuffled index batches covering 0..n-1 once."""
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]
