"""Candidate scoring, pass@k estimation, and geometric analysis reports.

A candidate solves a task iff it parses and reproduces every spec
output bit-exactly in binary32.  pass@k uses the unbiased estimator
1 - C(n-c, k)/C(n, k) in stable product form.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import TaskInstance
from .evaluator import eval_grid
from .grammar import ParseError, parse

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)
DEFAULT_CHAR_CAP = 256


class HarnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# matching and pass@k
# ---------------------------------------------------------------------------


def functional_match(
    candidate: str,
    task: TaskInstance,
    char_cap: int = DEFAULT_CHAR_CAP,
    rel_tol: float | None = None,
) -> bool:
    """True iff the candidate reproduces every spec pair.

    Default comparison is bit-exact binary32 equality; rel_tol switches
    to relative tolerance (off by default).  Unparseable, oversized, or
    non-finite-output candidates are failures, never errors.
    """
    if len(candidate) > char_cap:
        log.debug("task %s: candidate over %d chars", task.task_id, char_cap)
        return False
    try:
        ast = parse(candidate)
    except ParseError as exc:
        log.debug("task %s: parse failure: %s", task.task_id, exc)
        return False
    got = eval_grid(ast, task.xs)
    if rel_tol is None:
        return bool(np.array_equal(got.view(np.uint32), task.ys.view(np.uint32)))
    if not np.isfinite(got).all():
        return False
    denom = np.maximum(np.abs(task.ys.astype(np.float64)), 1e-12)
    return bool(
        (np.abs(got.astype(np.float64) - task.ys.astype(np.float64)) / denom <= rel_tol).all()
    )


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: fraction of size-k candidate subsets with a success."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    # 1 - prod_{j=0}^{k-1} (n - c - j) / (n - j)
    j = np.arange(k, dtype=np.float64)
    return float(1.0 - np.prod((n - c - j) / (n - j)))


# ---------------------------------------------------------------------------
# run evaluation
# ---------------------------------------------------------------------------


@dataclass
class CandidateSet:
    """All decoded programs for one task, with decode metadata."""

    task_id: int
    candidates: list[str]
    temperature: float = 0.0
    seed: int = 0
    model_id: str = ""
    flops: float = 0.0


@dataclass
class EvalReport:
    """Per-task match counts and pass@k, plus run-level aggregates."""

    task_ids: np.ndarray
    n: np.ndarray
    c: np.ndarray
    ks: tuple
    pass_at: dict = field(default_factory=dict)  # k -> per-task estimates
    flops: float = 0.0

    @property
    def solved(self) -> np.ndarray:
        return self.c > 0

    def mean_pass_at(self, k: int) -> float:
        return float(self.pass_at[k].mean())

    def to_json(self) -> dict:
        return {
            "task_ids": self.task_ids.tolist(),
            "n": self.n.tolist(),
            "c": self.c.tolist(),
            "ks": list(self.ks),
            "flops": self.flops,
            "mean_pass_at": {str(k): self.mean_pass_at(k) for k in self.ks},
        }


def evaluate_run(
    tasks: list[TaskInstance],
    candidate_sets: list[CandidateSet],
    ks=DEFAULT_KS,
    char_cap: int = DEFAULT_CHAR_CAP,
    rel_tol: float | None = None,
) -> EvalReport:
    """Score one decode run: per-task c, pass@k for each requested k."""
    by_task = {cs.task_id: cs for cs in candidate_sets}
    missing = [t.task_id for t in tasks if t.task_id not in by_task]
    if missing:
        raise HarnessError(f"{len(missing)} tasks lack candidates, e.g. {missing[:5]}")
    ks = tuple(ks)
    n = np.array([len(by_task[t.task_id].candidates) for t in tasks])
    if (n < max(ks)).any():
        raise HarnessError(f"every task needs at least n >= {max(ks)} candidates")
    c = np.empty(len(tasks), dtype=np.int64)
    for i, t in enumerate(tasks):
        c[i] = sum(
            functional_match(cand, t, char_cap, rel_tol)
            for cand in by_task[t.task_id].candidates
        )
    pass_at = {
        k: np.array([pass_at_k(n[i], c[i], k) for i in range(len(tasks))]) for k in ks
    }
    flops = max((cs.flops for cs in candidate_sets), default=0.0)
    return EvalReport(
        np.array([t.task_id for t in tasks]), n, c, ks, pass_at, flops
    )


def aggregate_runs(reports: list[EvalReport]) -> dict:
    """Mean +- population std of mean pass@k across independent runs."""
    if not reports:
        raise HarnessError("no reports to aggregate")
    ks = reports[0].ks
    if any(r.ks != ks for r in reports):
        raise HarnessError("reports disagree on k values")
    out = {"runs": len(reports), "ks": list(ks), "mean": {}, "std": {}}
    for k in ks:
        vals = np.array([r.mean_pass_at(k) for r in reports])
        out["mean"][k] = float(vals.mean())
        out["std"][k] = float(vals.std())
    return out


# ---------------------------------------------------------------------------
# geometric and scaling analysis
# ---------------------------------------------------------------------------


def nearest_train_distances(test_ids, train_ids, rows: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Min distance from each test row to any train row."""
    test_ids = np.asarray(test_ids)
    train_ids = np.asarray(train_ids)
    if len(train_ids) == 0:
        raise HarnessError("empty train split")
    tr = rows[train_ids].astype(np.float64)
    sq = np.einsum("ij,ij->i", tr, tr)
    out = np.empty(len(test_ids), dtype=np.float64)
    for start in range(0, len(test_ids), chunk):
        q = rows[test_ids[start : start + chunk]].astype(np.float64)
        d2 = np.einsum("ij,ij->i", q, q)[:, None] - 2.0 * (q @ tr.T) + sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        near = np.argmin(d2, axis=1)
        diff = q - tr[near]
        out[start : start + chunk] = np.sqrt((diff * diff).sum(axis=1))
    return out.astype(np.float32)


def nn_distance_report(
    test_ids, train_ids, sem: np.ndarray, syn: np.ndarray, solved: np.ndarray
) -> dict:
    """Nearest-train distances per test task, grouped by solved flag."""
    test_ids = np.asarray(test_ids)
    solved = np.asarray(solved, dtype=bool)
    if len(solved) != len(test_ids):
        raise HarnessError("solved flags do not align with test ids")
    d_sem = nearest_train_distances(test_ids, train_ids, sem)
    d_syn = nearest_train_distances(test_ids, train_ids, syn)
    rows = [
        {
            "task_id": int(test_ids[i]),
            "d_sem": float(d_sem[i]),
            "d_syn": float(d_syn[i]),
            "solved": bool(solved[i]),
        }
        for i in range(len(test_ids))
    ]

    def group(mask):
        if not mask.any():
            return {"count": 0, "mean_d_sem": None, "mean_d_syn": None}
        return {
            "count": int(mask.sum()),
            "mean_d_sem": float(d_sem[mask].mean()),
            "mean_d_syn": float(d_syn[mask].mean()),
        }

    return {
        "rows": rows,
        "all": group(np.ones(len(test_ids), dtype=bool)),
        "solved": group(solved),
        "failed": group(~solved),
    }


def scaling_report(tagged_reports: list[tuple[str, EvalReport]], k: int = 1) -> dict:
    """pass@k vs log10 FLOPs per split, with a least-squares slope."""
    by_split: dict[str, list[EvalReport]] = {}
    for split, rep in tagged_reports:
        by_split.setdefault(split, []).append(rep)
    rows, fits = [], {}
    for split, reps in by_split.items():
        pts = [(r.flops, r.mean_pass_at(k)) for r in reps]
        for f, p in pts:
            rows.append({"split": split, "flops": f, f"pass_at_{k}": p})
        distinct = sorted({f for f, _ in pts})
        if len(distinct) < 2:
            raise HarnessError(f"split {split!r}: need >= 2 distinct FLOPs points")
        x = np.log10([f for f, _ in pts])
        y = np.array([p for _, p in pts])
        slope, intercept = np.polyfit(x, y, 1)
        fits[split] = {"slope": float(slope), "intercept": float(intercept)}
    return {"rows": rows, "fits": fits, "k": k}


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_candidate_file(path, candidate_sets: list[CandidateSet]) -> None:
    with open(path, "w") as fh:
        for cs in candidate_sets:
            fh.write(
                json.dumps(
                    {
                        "task_id": cs.task_id,
                        "candidates": cs.candidates,
                        "temperature": cs.temperature,
                        "seed": cs.seed,
                        "model_id": cs.model_id,
                        "flops": cs.flops,
                    }
                )
                + "\n"
            )


def load_candidate_file(path) -> list[CandidateSet]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                out.append(
                    CandidateSet(
                        int(obj["task_id"]),
                        list(obj["candidates"]),
                        float(obj.get("temperature", 0.0)),
                        int(obj.get("seed", 0)),
                        str(obj.get("model_id", "")),
                        float(obj.get("flops", 0.0)),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise HarnessError(f"{path}:{lineno}: malformed candidate line: {exc}")
    return out


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "n", "c", "solved"] + [f"pass_at_{k}" for k in report.ks])
        for i in range(len(report.task_ids)):
            writer.writerow(
                [int(report.task_ids[i]), int(report.n[i]), int(report.c[i]),
                 int(report.c[i] > 0)]
                + [f"{report.pass_at[k][i]:.10g}" for k in report.ks]
            )


def write_nn_report_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "d_sem", "d_syn", "solved"])
        for row in report["rows"]:
            writer.writerow(
                [row["task_id"], f"{row['d_sem']:.10g}", f"{row['d_syn']:.10g}",
                 int(row["solved"])]
            )
