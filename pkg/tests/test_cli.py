import json
import os

import numpy as np
import pytest

from arithbench import cli, datasets, harness, sampler


def write_config(path, **overrides):
    cfg = {
        "max_ops": 3,
        "domain": {"lo": -10.0, "hi": 10.0, "budget": 200_000, "required_pairs": 50},
        "seed": 5,
        "train_size": 100,
        "test_size": 30,
        "fit_sample": 2000,
        "output": str(path.parent / "out"),
        "export_splits": ["diverse", "sem-extrap"],
        "pass_ks": [1, 5],
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return cfg


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, capsys_disabled=None):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    write_config(cfg_path)
    rc = run_cli("all", "--config", str(cfg_path))
    assert rc == cli.EXIT_OK
    return root


def test_all_produces_artifacts(pipeline_dir):
    out = pipeline_dir / "out"
    for name in ["universe.pmun", "grammar.txt", "sem.pmem", "syn.pmem",
                 "sem.pmmo", "syn.pmmo", "manifest.json"]:
        assert (out / name).exists(), name
    for split in ("diverse", "sem-extrap"):
        assert (out / "splits" / f"{split}.json").exists()
        assert (out / "datasets" / f"{split}.train.jsonl").exists()
        assert (out / "datasets" / f"{split}.test.jsonl").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) >= {"enumerate", "embed", "split", "export"}
    summary = manifest["stages"]["enumerate"]["summary"]
    assert summary["raw_total"] == 1 + 9 + 117 + 1845
    # without candidates, evaluate/analyze are soft-skipped
    assert "evaluate" not in manifest["stages"]


def test_grammar_file_mentions_operators(pipeline_dir):
    text = (pipeline_dir / "out" / "grammar.txt").read_text()
    for tok in ("sin", "cos", "exp", "log", "sqrt", "grammar-hash"):
        assert tok in text


def test_rerun_is_idempotent(pipeline_dir, capsys):
    rc = run_cli("all", "--config", str(pipeline_dir / "config.json"))
    assert rc == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)["results"]
    for st in ("enumerate", "embed", "split", "export"):
        assert results[st] == {"skipped": True}


def test_verify_clean_then_tampered(pipeline_dir, capsys):
    cfg = str(pipeline_dir / "config.json")
    assert run_cli("verify", "--config", cfg) == cli.EXIT_OK
    capsys.readouterr()
    target = pipeline_dir / "out" / "grammar.txt"
    original = target.read_bytes()
    try:
        target.write_bytes(original + b"x")
        assert run_cli("verify", "--config", cfg) == cli.EXIT_VERIFY
        out = json.loads(capsys.readouterr().out)
        assert out["results"]["violations"][0]["file"] == "grammar.txt"
    finally:
        target.write_bytes(original)


def test_evaluate_and_analyze_with_candidates(pipeline_dir, capsys):
    out = pipeline_dir / "out"
    cand_dir = out / "candidates"
    cand_dir.mkdir(exist_ok=True)
    for split in ("diverse", "sem-extrap"):
        tasks = datasets.import_dataset(out / "datasets", split)["test"]
        for run, (maker, flops) in enumerate(
            [(lambda t: t.source, 1e9), (lambda t: "bogus(", 1e10)]
        ):
            sets = [
                harness.CandidateSet(t.task_id, [maker(t)] * 5, 0.8, run, "ref", flops)
                for t in tasks
            ]
            harness.write_candidate_file(cand_dir / f"{split}.run{run}.jsonl", sets)
    cfg = str(pipeline_dir / "config.json")
    assert run_cli("evaluate", "--config", cfg) == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)["results"]
    agg = results["evaluate"]["diverse"]
    # one perfect run and one all-miss run: mean 0.5, std 0.5 at every k
    assert agg["mean"]["1"] == 0.5 and agg["std"]["1"] == 0.5

    assert run_cli("analyze", "--config", cfg) == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)["results"]
    assert (out / "reports" / "diverse.nn.csv").exists()
    assert (out / "reports" / "scaling.json").exists()
    # pass@1 drops from 1.0 to 0.0 over one decade of FLOPs: slope -1
    assert abs(results["analyze"]["scaling"]["diverse"]["slope"] + 1.0) < 1e-9
    nn = results["analyze"]["diverse"]
    assert nn["all"]["count"] == 30
    assert nn["solved"]["count"] == 30 and nn["failed"]["count"] == 0


def test_stale_upstream_exit_code(tmp_path):
    cfg_path = tmp_path / "config.json"
    write_config(cfg_path)
    assert run_cli("export", "--config", str(cfg_path)) == cli.EXIT_STALE


def test_capacity_exit_code(tmp_path):
    cfg_path = tmp_path / "config.json"
    write_config(cfg_path, max_ops=2, train_size=500_000)
    assert run_cli("enumerate", "--config", str(cfg_path)) == cli.EXIT_OK
    assert run_cli("embed", "--config", str(cfg_path)) == cli.EXIT_OK
    assert run_cli("split", "--config", str(cfg_path)) == cli.EXIT_CAPACITY


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("enumerate", "--config", str(bad)) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"max_ops": -3}))
    assert run_cli("enumerate", "--config", str(bad)) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"export_splits": ["nonsense"]}))
    assert run_cli("enumerate", "--config", str(bad)) == cli.EXIT_CONFIG


def test_two_op_universe_is_exactly_enumerated(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    write_config(cfg_path, max_ops=2)
    assert run_cli("enumerate", "--config", str(cfg_path)) == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)["results"]
    summary = results["enumerate"]
    assert summary["raw_total"] == 127
    assert summary["raw_counts"] == [1, 9, 117]
    assert 0 < summary["universe_size"] <= 127


def test_seed_and_output_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    write_config(cfg_path, max_ops=1)
    alt = tmp_path / "alt"
    rc = run_cli(
        "enumerate", "--config", str(cfg_path), "--output", str(alt),
        "--seed-override", "99",
    )
    assert rc == cli.EXIT_OK
    assert (alt / "universe.pmun").exists()
    from arithbench.universe import Universe

    assert Universe.load(alt / "universe.pmun").seed == 99


def test_config_hash_changes_invalidate_stages(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    write_config(cfg_path, max_ops=1, output=str(tmp_path / "out"))
    assert run_cli("enumerate", "--config", str(cfg_path)) == cli.EXIT_OK
    capsys.readouterr()
    write_config(cfg_path, max_ops=2, output=str(tmp_path / "out"))
    assert run_cli("enumerate", "--config", str(cfg_path)) == cli.EXIT_OK
    results = json.loads(capsys.readouterr().out)["results"]
    assert results["enumerate"].get("skipped") is not True
    assert results["enumerate"]["raw_total"] == 127
