"""Programming-by-example task files.

Each task pairs a ground-truth program with 1,000 seeded input-output
examples drawn from the same stream that decided the program's
validity.  Floats are serialized as the shortest decimal strings that
round-trip binary32, so any ecosystem with a standard parser reads
bit-exact values.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluator import EvalDomain, collect_spec_pairs
from .grammar import parse, render
from .sampler import SplitSpec
from .universe import Universe


class DatasetError(ValueError):
    pass


@dataclass
class TaskInstance:
    """One synthesis task: a hidden program plus its example spec."""

    task_id: int
    source: str
    xs: np.ndarray = field(repr=False)
    ys: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float32)
        self.ys = np.asarray(self.ys, dtype=np.float32)
        if self.xs.shape != self.ys.shape:
            raise DatasetError("spec x/y length mismatch")
        if not np.isfinite(self.ys).all():
            raise DatasetError("spec contains non-finite outputs")
        if len(np.unique(self.xs)) != len(self.xs):
            raise DatasetError("spec contains repeated inputs")


def sample_spec(ast, dom: EvalDomain, seed: int, task_id: int = -1) -> TaskInstance:
    """Task instance from the program's own validity stream."""
    xs, ys = collect_spec_pairs(ast, dom, seed)
    return TaskInstance(task_id, render(ast), xs, ys, seed)


def format_float(v) -> str:
    """Shortest decimal string that parses back to the same binary32."""
    return str(np.float32(v))


def parse_float(s: str) -> np.float32:
    return np.float32(float(s))


def _task_line(t: TaskInstance) -> str:
    pairs = ",".join(
        f"[{format_float(x)},{format_float(y)}]" for x, y in zip(t.xs, t.ys)
    )
    return f'{{"task_id":{t.task_id},"source":{json.dumps(t.source)},"spec":[{pairs}]}}'


def _parse_task_line(line: str, lineno: int, path) -> TaskInstance:
    try:
        obj = json.loads(line)
        spec = np.array(obj["spec"], dtype=np.float64)
        if spec.ndim != 2 or spec.shape[1] != 2:
            raise ValueError("spec must be a list of [x, y] pairs")
        return TaskInstance(
            int(obj["task_id"]),
            obj["source"],
            spec[:, 0].astype(np.float32),
            spec[:, 1].astype(np.float32),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}:{lineno}: malformed task line: {exc}") from exc


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_task_file(path, tasks) -> str:
    """JSON-lines task file; returns its sha-256."""
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(_task_line(t) + "\n")
    return _sha256(path)


def load_task_file(path) -> list[TaskInstance]:
    tasks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetError(
                    f"{path}: truncated after line {lineno - 1} (last valid line)"
                )
            tasks.append(_parse_task_line(line.rstrip("\n"), lineno, path))
    return tasks


def generate_tasks(u: Universe, ids, progress=None) -> list[TaskInstance]:
    """Spec generation for universe ids, using the universe's own domain
    and seed so it cannot disagree with the validity decisions."""
    tasks = []
    for i, pid in enumerate(ids):
        pid = int(pid)
        tasks.append(sample_spec(u.ast(pid), u.domain, u.seed, pid))
        if progress is not None:
            progress(i + 1, len(ids))
    return tasks


def export_dataset(split: SplitSpec, u: Universe, out_dir, progress=None) -> dict:
    """Materialize one split as train/test JSON-lines plus a manifest."""
    n = len(u)
    for ids in (split.train_ids, split.test_ids):
        bad = np.asarray(ids)[(np.asarray(ids) < 0) | (np.asarray(ids) >= n)]
        if len(bad):
            raise DatasetError(f"split ids outside universe: {bad[:5].tolist()}")
    manifest = {
        "split": split.meta(),
        "universe_hash": u.content_hash(),
        "domain": u.domain.to_json(),
        "seed": u.seed,
        "files": {},
    }
    for role, ids in (("train", split.train_ids), ("test", split.test_ids)):
        name = f"{split.name}.{role}.jsonl"
        digest = write_task_file(
            os.path.join(out_dir, name), generate_tasks(u, ids, progress)
        )
        manifest["files"][name] = {"sha256": digest, "count": int(len(ids))}
    with open(os.path.join(out_dir, f"{split.name}.manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def import_dataset(out_dir, name: str) -> dict[str, list[TaskInstance]]:
    """Load an exported split back, validating file hashes."""
    with open(os.path.join(out_dir, f"{name}.manifest.json")) as fh:
        manifest = json.load(fh)
    out: dict[str, list[TaskInstance]] = {}
    for fname, meta in manifest["files"].items():
        path = os.path.join(out_dir, fname)
        digest = _sha256(path)
        if digest != meta["sha256"]:
            raise DatasetError(
                f"{path}: sha-256 mismatch (manifest {meta['sha256'][:12]}..., "
                f"file {digest[:12]}...)"
            )
        tasks = load_task_file(path)
        if len(tasks) != meta["count"]:
            raise DatasetError(
                f"{path}: {len(tasks)} tasks, manifest says {meta['count']}"
            )
        role = fname.rsplit(".", 2)[-2]
        out[role] = tasks
    return out


def verify_task(t: TaskInstance) -> bool:
    """Recheck that the stored spec matches the stored program bit-exactly."""
    from .evaluator import eval_grid

    ast = parse(t.source)
    got = eval_grid(ast, t.xs)
    return bool(np.array_equal(got.view(np.uint32), t.ys.view(np.uint32)))
