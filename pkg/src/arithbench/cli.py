"""Pipeline driver: one declarative config, resumable hashed stages.

Stages run in order (enumerate -> embed -> split -> export -> evaluate
-> analyze); each writes its artifacts plus an entry in the root
manifest keyed by the config hash, so re-running a completed stage is
a no-op and stale upstream artifacts are detected.  Progress goes to
stderr, machine-readable stage summaries to stdout.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import datasets, harness, kernels, manifolds, sampler, universe
from .evaluator import (
    DEFAULT_SEMANTIC_GRID_SIZE,
    DEFAULT_SIGNATURE_GRID_SIZE,
    EvalDomain,
)
from .grammar import GRAMMAR_SPEC, grammar_hash

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALE = 3
EXIT_CAPACITY = 4
EXIT_IO = 5
EXIT_VERIFY = 6

STAGES = ("enumerate", "embed", "split", "export", "evaluate", "analyze")


class StaleUpstreamError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    """Everything a build needs; its hash identifies the build."""

    max_ops: int = 4
    domain: EvalDomain = field(default_factory=EvalDomain)
    sig_grid_size: int = DEFAULT_SIGNATURE_GRID_SIZE
    sem_grid_size: int = DEFAULT_SEMANTIC_GRID_SIZE
    hash_dim: int = manifolds.DEFAULT_HASH_DIM
    dim: int = manifolds.DEFAULT_DIM
    fit_sample: int = manifolds.DEFAULT_FIT_SAMPLE
    seed: int = 0
    train_size: int = sampler.DEFAULT_TRAIN_SIZE
    test_size: int = sampler.DEFAULT_TEST_SIZE
    knn_k: int = sampler.DEFAULT_K
    inside_fraction: float = sampler.DEFAULT_INSIDE_FRACTION
    exact_validity: bool = False
    output: str = "out"
    export_splits: list = field(default_factory=lambda: list(sampler.SPLIT_NAMES))
    pass_ks: list = field(default_factory=lambda: list(harness.DEFAULT_KS))

    def __post_init__(self):
        if isinstance(self.domain, dict):
            self.domain = EvalDomain.from_json(self.domain)
        if self.max_ops < 0:
            raise ValueError("max_ops must be >= 0")
        unknown = set(self.export_splits) - set(sampler.SPLIT_NAMES)
        if unknown:
            raise ValueError(f"unknown split names: {sorted(unknown)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["domain"] = self.domain.to_json()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _progress(label):
    last = [0.0]

    def cb(done, total):
        now = time.time()
        if now - last[0] > 2.0 or done == total:
            last[0] = now
            print(f"{label}: {done}/{total}", file=sys.stderr)

    return cb


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.output
        os.makedirs(self.root, exist_ok=True)

    # -- manifest plumbing --------------------------------------------------

    @property
    def manifest_path(self):
        return os.path.join(self.root, "manifest.json")

    def load_manifest(self) -> dict:
        if not os.path.exists(self.manifest_path):
            return {"config_hash": self.cfg.config_hash(), "stages": {}}
        with open(self.manifest_path) as fh:
            return json.load(fh)

    def save_manifest(self, manifest: dict) -> None:
        with open(self.manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def stage_done(self, manifest: dict, stage: str) -> bool:
        entry = manifest["stages"].get(stage)
        if entry is None or entry["config_hash"] != self.cfg.config_hash():
            return False
        return all(
            os.path.exists(os.path.join(self.root, f)) and _sha256(os.path.join(self.root, f)) == h
            for f, h in entry["files"].items()
        )

    def record_stage(self, stage: str, files: list, summary: dict) -> dict:
        manifest = self.load_manifest()
        manifest["config_hash"] = self.cfg.config_hash()
        manifest["stages"][stage] = {
            "config_hash": self.cfg.config_hash(),
            "files": {f: _sha256(os.path.join(self.root, f)) for f in files},
            "summary": summary,
        }
        self.save_manifest(manifest)
        return manifest["stages"][stage]

    def require_stage(self, stage: str) -> dict:
        manifest = self.load_manifest()
        if not self.stage_done(manifest, stage):
            raise StaleUpstreamError(
                f"stage {stage!r} has no up-to-date manifest entry; run it first"
            )
        return manifest["stages"][stage]["summary"]

    def path(self, name):
        return os.path.join(self.root, name)

    # -- artifact loading ---------------------------------------------------

    def load_universe(self) -> universe.Universe:
        self.require_stage("enumerate")
        return universe.Universe.load(self.path("universe.pmun"))

    def load_embeddings(self):
        self.require_stage("embed")
        _, sem = manifolds.load_embedding_matrix(self.path("sem.pmem"))
        _, syn = manifolds.load_embedding_matrix(self.path("syn.pmem"))
        flags = sampler.load_id_list(self.path("syn_zero.pmid"))
        zero = np.zeros(len(syn), dtype=bool)
        zero[flags] = True
        return np.ascontiguousarray(sem), np.ascontiguousarray(syn), zero

    # -- stages -------------------------------------------------------------

    def stage_enumerate(self) -> dict:
        cfg = self.cfg
        u = universe.build_universe(
            cfg.max_ops,
            cfg.domain,
            seed=cfg.seed,
            sig_grid_size=cfg.sig_grid_size,
            exact_validity=cfg.exact_validity,
            progress=lambda msg: print(msg, file=sys.stderr),
        )
        u.save(self.path("universe.pmun"))
        with open(self.path("grammar.txt"), "w") as fh:
            fh.write(GRAMMAR_SPEC)
            fh.write(f"\n# grammar-hash: {grammar_hash()}\n")
        classes = universe.partition_equivalence(u)
        summary = {
            "raw_counts": [int(c) for c in u.raw_counts],
            "raw_total": int(np.sum(u.raw_counts)),
            "valid_counts": [int(c) for c in u.valid_counts],
            "universe_size": len(u),
            "n_classes": classes.n_classes,
            "universe_hash": u.content_hash(),
            "grammar_hash": grammar_hash(),
        }
        self.record_stage("enumerate", ["universe.pmun", "grammar.txt"], summary)
        return summary

    def stage_embed(self) -> dict:
        cfg = self.cfg
        u = self.load_universe()
        sem_model = manifolds.fit_semantic(
            u, cfg.sem_grid_size, cfg.dim, cfg.seed, cfg.fit_sample
        )
        sem = manifolds.embed_universe_semantic(u, sem_model)
        syn_model = manifolds.fit_syntactic(
            u, h=cfg.hash_dim, d=cfg.dim, seed=cfg.seed, sample_size=cfg.fit_sample
        )
        syn, zero = manifolds.embed_universe_syntactic(u, syn_model)
        manifolds.save_model(self.path("sem.pmmo"), sem_model)
        manifolds.save_model(self.path("syn.pmmo"), syn_model)
        manifolds.save_embedding_matrix(self.path("sem.pmem"), "sem", sem)
        manifolds.save_embedding_matrix(self.path("syn.pmem"), "syn", syn)
        sampler.save_id_list(self.path("syn_zero.pmid"), np.flatnonzero(zero))
        summary = {
            "rows": len(u),
            "dim": cfg.dim,
            "zero_projections": int(zero.sum()),
            "sem_explained_variance": sem_model.explained_variance.tolist(),
            "syn_singular_values": syn_model.singular_values.tolist(),
        }
        self.record_stage(
            "embed",
            ["sem.pmmo", "syn.pmmo", "sem.pmem", "syn.pmem", "syn_zero.pmid"],
            summary,
        )
        return summary

    def stage_split(self) -> dict:
        cfg = self.cfg
        u = self.load_universe()
        sem, syn, zero = self.load_embeddings()
        classes = universe.partition_equivalence(u)
        splits = sampler.build_density_splits(
            u, classes, sem, syn,
            train_size=cfg.train_size, test_size=cfg.test_size,
            pool_seed=cfg.seed, seed=cfg.seed, k=cfg.knn_k,
        )
        support, partitions = sampler.build_support_splits(
            u, sem, syn,
            train_size=cfg.train_size, test_size=cfg.test_size,
            seed=cfg.seed, inside_fraction=cfg.inside_fraction,
            syn_zero_flags=zero,
        )
        splits.update(support)
        split_dir = self.path("splits")
        os.makedirs(split_dir, exist_ok=True)
        files = []
        for s in splits.values():
            sampler.save_split(s, split_dir)
            files += [f"splits/{s.name}.{ext}" for ext in ("json", "train.pmid", "test.pmid")]
        summary = {
            "splits": sorted(splits),
            "radii": {t: p.radius for t, p in partitions.items()},
            "inside_counts": {t: int(len(p.s_in)) for t, p in partitions.items()},
            "outside_counts": {t: int(len(p.s_out)) for t, p in partitions.items()},
        }
        self.record_stage("split", files, summary)
        return summary

    def stage_export(self) -> dict:
        cfg = self.cfg
        u = self.load_universe()
        self.require_stage("split")
        data_dir = self.path("datasets")
        os.makedirs(data_dir, exist_ok=True)
        files, counts = [], {}
        for name in cfg.export_splits:
            spec = sampler.load_split(self.path("splits"), name)
            if spec.universe_hash != u.content_hash():
                raise StaleUpstreamError(f"split {name!r} was built from another universe")
            datasets.export_dataset(spec, u, data_dir, progress=_progress(f"export {name}"))
            files += [
                f"datasets/{name}.manifest.json",
                f"datasets/{name}.train.jsonl",
                f"datasets/{name}.test.jsonl",
            ]
            counts[name] = {
                "train": int(len(spec.train_ids)),
                "test": int(len(spec.test_ids)),
            }
        summary = {"exported": counts}
        self.record_stage("export", files, summary)
        return summary

    def stage_evaluate(self) -> dict:
        cfg = self.cfg
        self.require_stage("export")
        cand_dir = self.path("candidates")
        report_dir = self.path("reports")
        os.makedirs(report_dir, exist_ok=True)
        files, summary = [], {}
        for name in cfg.export_splits:
            pattern = os.path.join(cand_dir, f"{name}*.jsonl")
            cand_files = sorted(glob.glob(pattern))
            if not cand_files:
                continue
            tasks = datasets.import_dataset(self.path("datasets"), name)["test"]
            reports = []
            for cf in cand_files:
                sets = harness.load_candidate_file(cf)
                reports.append(harness.evaluate_run(tasks, sets, cfg.pass_ks))
            agg = harness.aggregate_runs(reports)
            rep_name = f"reports/{name}.csv"
            harness.write_report_csv(self.path(rep_name), reports[0])
            rep_json = f"reports/{name}.json"
            with open(self.path(rep_json), "w") as fh:
                json.dump(
                    {"aggregate": agg, "runs": [r.to_json() for r in reports]},
                    fh, indent=2, sort_keys=True,
                )
                fh.write("\n")
            files += [rep_name, rep_json]
            summary[name] = agg
        if not summary:
            raise FileNotFoundError(f"no candidate files found under {cand_dir}")
        self.record_stage("evaluate", files, summary)
        return summary

    def stage_analyze(self) -> dict:
        cfg = self.cfg
        self.require_stage("evaluate")
        sem, syn, _ = self.load_embeddings()
        report_dir = self.path("reports")
        files, summary, tagged = [], {}, []
        for name in cfg.export_splits:
            rep_path = self.path(f"reports/{name}.json")
            if not os.path.exists(rep_path):
                continue
            with open(rep_path) as fh:
                blob = json.load(fh)
            spec = sampler.load_split(self.path("splits"), name)
            run0 = blob["runs"][0]
            solved = np.array(run0["c"]) > 0
            nn = harness.nn_distance_report(
                np.array(run0["task_ids"]), spec.train_ids, sem, syn, solved
            )
            out_name = f"reports/{name}.nn.csv"
            harness.write_nn_report_csv(self.path(out_name), nn)
            files.append(out_name)
            summary[name] = {g: nn[g] for g in ("all", "solved", "failed")}
            for run in blob["runs"]:
                rep = harness.EvalReport(
                    np.array(run["task_ids"]), np.array(run["n"]), np.array(run["c"]),
                    tuple(run["ks"]),
                    {k: np.array([run["mean_pass_at"][str(k)]]) for k in run["ks"]},
                    run["flops"],
                )
                tagged.append((name, rep))
        flops_per_split = {}
        for name, rep in tagged:
            flops_per_split.setdefault(name, set()).add(rep.flops)
        scalable = [t for t in tagged if len(flops_per_split[t[0]]) >= 2]
        if scalable:
            sc = harness.scaling_report(scalable, k=min(cfg.pass_ks))
            with open(self.path("reports/scaling.json"), "w") as fh:
                json.dump(sc, fh, indent=2, sort_keys=True)
                fh.write("\n")
            files.append("reports/scaling.json")
            summary["scaling"] = sc["fits"]
        self.record_stage("analyze", files, summary)
        return summary

    def verify(self) -> dict:
        manifest = self.load_manifest()
        bad = []
        for stage, entry in manifest["stages"].items():
            for f, h in entry["files"].items():
                p = os.path.join(self.root, f)
                if not os.path.exists(p):
                    bad.append({"stage": stage, "file": f, "error": "missing"})
                elif _sha256(p) != h:
                    bad.append({"stage": stage, "file": f, "error": "hash mismatch"})
        return {"stages": sorted(manifest["stages"]), "violations": bad}

    def run(self, stage: str) -> dict:
        if stage == "verify":
            return self.verify()
        stages = STAGES if stage == "all" else (stage,)
        manifest = self.load_manifest()
        results = {}
        skipped_eval = False
        for st in stages:
            if self.stage_done(manifest, st):
                print(f"stage {st}: up to date, skipping", file=sys.stderr)
                results[st] = {"skipped": True}
                continue
            if stage == "all" and st == "analyze" and skipped_eval:
                results[st] = {"skipped": True, "reason": "evaluate was skipped"}
                continue
            t0 = time.time()
            print(f"stage {st}: running", file=sys.stderr)
            try:
                results[st] = getattr(self, f"stage_{st}")()
            except FileNotFoundError as exc:
                # candidates come from an external trainer; without them a
                # full-pipeline run stops cleanly after export
                if stage == "all" and st == "evaluate":
                    print(f"stage {st}: skipped ({exc})", file=sys.stderr)
                    results[st] = {"skipped": True, "reason": str(exc)}
                    skipped_eval = True
                    continue
                raise
            results[st]["elapsed_s"] = round(time.time() - t0, 2)
            manifest = self.load_manifest()
        return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="arithbench",
        description="Program-synthesis benchmark pipeline over a bounded arithmetic DSL.",
    )
    parser.add_argument("stage", choices=STAGES + ("all", "verify"))
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed-override", type=int, default=None)
    parser.add_argument("--output", default=None, help="output root override")
    args = parser.parse_args(argv)

    try:
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        if args.seed_override is not None:
            cfg.seed = args.seed_override
        output = args.output or os.environ.get("ARITHBENCH_OUTPUT")
        if output:
            cfg.output = output
        threads = args.threads or int(os.environ.get("ARITHBENCH_THREADS", 0))
        if threads:
            kernels.set_threads(threads)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    pipe = Pipeline(cfg)
    try:
        results = pipe.run(args.stage)
    except StaleUpstreamError as exc:
        print(f"stale upstream: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (sampler.SplitError, universe.UniverseBuildError, datasets.DatasetError,
            harness.HarnessError, ValueError) as exc:
        print(f"capacity/validation error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    print(json.dumps({"stage": args.stage, "results": results}, indent=2, sort_keys=True))
    if args.stage == "verify" and results["violations"]:
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
