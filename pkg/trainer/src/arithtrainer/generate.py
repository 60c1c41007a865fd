"""Candidate generation in the harness's JSON-lines format.

One line per task: {"task_id", "candidates", "temperature", "seed",
"model_id", "flops"}.
"""

from __future__ import annotations

import json

import torch

from .data import TaskExample, encode_specs
from .model import SpecToProgramModel
from .vocab import Vocab

DEFAULT_TEMPERATURE = 0.8
DEFAULT_N_CANDIDATES = 10


def generate_candidates(
    model: SpecToProgramModel,
    vocab: Vocab,
    tasks: list[TaskExample],
    n: int = DEFAULT_N_CANDIDATES,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
    batch_size: int = 32,
) -> list[dict]:
    gen = torch.Generator().manual_seed(seed)
    out = []
    for start in range(0, len(tasks), batch_size):
        chunk = tasks[start : start + batch_size]
        spec = encode_specs(chunk, model.cfg.n_pairs)
        cands = model.decode_candidates(spec, vocab, n, temperature, gen)
        for t, cs in zip(chunk, cands):
            out.append({"task_id": t.task_id, "candidates": cs})
    return out


def write_candidate_file(
    path,
    rows: list[dict],
    temperature: float,
    seed: int,
    model_id: str,
    flops: float,
) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(
                json.dumps(
                    {
                        "task_id": row["task_id"],
                        "candidates": row["candidates"],
                        "temperature": temperature,
                        "seed": seed,
                        "model_id": model_id,
                        "flops": flops,
                    }
                )
                + "\n"
            )
