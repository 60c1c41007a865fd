import csv
import math
from itertools import combinations

import numpy as np
import pytest

from arithbench import datasets as ds
from arithbench import evaluator as ev
from arithbench import grammar as g
from arithbench import harness as hn


def make_task(src, task_id=0, pairs=50):
    dom = ev.EvalDomain(budget=100_000, required_pairs=pairs)
    return ds.sample_spec(g.parse(src), dom, seed=2, task_id=task_id)


# -- functional match --------------------------------------------------------


def test_match_ground_truth_and_equivalents():
    t = make_task("sin(x)")
    assert hn.functional_match("sin(x)", t)
    assert hn.functional_match(" sin( x ) ", t)  # whitespace-insensitive parse
    assert not hn.functional_match("cos(x)", t)
    assert not hn.functional_match("sin(x", t)  # parse failure is a miss
    assert not hn.functional_match("", t)


def test_match_accepts_observationally_equivalent_program():
    t = make_task("x")
    assert hn.functional_match("((x+x)-x)", t)


def test_match_respects_char_cap():
    t = make_task("x")
    long = "(" * 0 + "x"
    assert hn.functional_match(long, t, char_cap=1)
    assert not hn.functional_match("((x+x)-x)", t, char_cap=5)


def test_match_is_bit_exact_by_default():
    t = make_task("(x/exp(x))")
    # algebraically equal but rounded differently in binary32
    assert not hn.functional_match("(x*exp((x-(x+x))))", t)
    assert hn.functional_match("(x*exp((x-(x+x))))", t, rel_tol=1e-5)


def test_match_rel_tol_rejects_non_finite():
    t = make_task("x")
    assert not hn.functional_match("exp(exp(x))", t, rel_tol=1e30)


# -- pass@k ------------------------------------------------------------------


def exhaustive_pass_at_k(n, c, k):
    """Oracle: enumerate all C(n, k) subsets of n candidates, c correct."""
    flags = [True] * c + [False] * (n - c)
    subsets = list(combinations(range(n), k))
    return sum(any(flags[i] for i in s) for s in subsets) / len(subsets)


def test_pass_at_k_matches_exhaustive_oracle():
    for n in range(1, 13):
        for c in range(n + 1):
            for k in range(1, n + 1):
                assert math.isclose(
                    hn.pass_at_k(n, c, k),
                    exhaustive_pass_at_k(n, c, k),
                    rel_tol=0,
                    abs_tol=1e-12,
                )


def test_pass_at_k_examples():
    assert hn.pass_at_k(10, 0, 5) == 0.0
    assert hn.pass_at_k(10, 10, 1) == 1.0
    assert hn.pass_at_k(10, 1, 10) == 1.0
    assert math.isclose(hn.pass_at_k(10, 3, 5), 0.9166666666666666, abs_tol=1e-12)
    assert math.isclose(hn.pass_at_k(4, 1, 1), 0.25, abs_tol=1e-15)


def test_pass_at_k_rejects_bad_args():
    with pytest.raises(ValueError):
        hn.pass_at_k(5, 6, 1)
    with pytest.raises(ValueError):
        hn.pass_at_k(5, 1, 0)
    with pytest.raises(ValueError):
        hn.pass_at_k(5, 1, 6)


# -- run evaluation ----------------------------------------------------------


def test_evaluate_run_end_to_end():
    tasks = [make_task("sin(x)", 0), make_task("(x*x)", 1)]
    sets = [
        hn.CandidateSet(0, ["sin(x)", "junk"] + ["cos(x)"] * 3, flops=1e9),
        hn.CandidateSet(1, ["(x+x)"] * 5, flops=2e9),
    ]
    report = hn.evaluate_run(tasks, sets, ks=(1, 5))
    assert report.n.tolist() == [5, 5]
    assert report.c.tolist() == [1, 0]
    assert report.solved.tolist() == [True, False]
    assert report.mean_pass_at(5) == 0.5
    assert math.isclose(report.mean_pass_at(1), 0.1)
    assert report.flops == 2e9
    js = report.to_json()
    assert js["mean_pass_at"]["5"] == 0.5


def test_evaluate_run_requires_coverage_and_depth():
    tasks = [make_task("x", 0)]
    with pytest.raises(hn.HarnessError, match="lack candidates"):
        hn.evaluate_run(tasks, [])
    with pytest.raises(hn.HarnessError, match="n >="):
        hn.evaluate_run(tasks, [hn.CandidateSet(0, ["x"])], ks=(1, 5))


def test_aggregate_runs():
    def rep(mean_c):
        n = np.full(4, 5)
        c = np.full(4, mean_c)
        pass_at = {1: np.array([hn.pass_at_k(5, mean_c, 1)] * 4)}
        return hn.EvalReport(np.arange(4), n, c, (1,), pass_at)

    agg = hn.aggregate_runs([rep(1), rep(2), rep(3)])
    assert agg["runs"] == 3
    assert math.isclose(agg["mean"][1], (0.2 + 0.4 + 0.6) / 3)
    expected_std = float(np.std([0.2, 0.4, 0.6]))
    assert math.isclose(agg["std"][1], expected_std)
    with pytest.raises(hn.HarnessError):
        hn.aggregate_runs([])


# -- geometric analysis ------------------------------------------------------


def test_nearest_train_distances():
    rows = np.array([[0.0], [1.0], [4.0], [10.0]], dtype=np.float32)
    d = hn.nearest_train_distances([2, 3], [0, 1], rows)
    assert np.allclose(d, [3.0, 9.0])
    with pytest.raises(hn.HarnessError):
        hn.nearest_train_distances([0], [], rows)


def test_nn_distance_report_grouping():
    sem = np.arange(6, dtype=np.float32)[:, None]
    syn = (np.arange(6, dtype=np.float32) * 2)[:, None]
    rep = hn.nn_distance_report([3, 4, 5], [0, 1, 2], sem, syn, [True, False, False])
    assert rep["all"]["count"] == 3
    assert rep["solved"]["count"] == 1 and rep["solved"]["mean_d_sem"] == 1.0
    assert rep["failed"]["count"] == 2 and rep["failed"]["mean_d_sem"] == 2.5
    assert rep["failed"]["mean_d_syn"] == 5.0
    none = hn.nn_distance_report([3], [0], sem, syn, [True])
    assert none["failed"]["count"] == 0 and none["failed"]["mean_d_sem"] is None


def test_scaling_report_recovers_slope():
    def rep(flops, p1):
        return hn.EvalReport(
            np.arange(2), np.full(2, 10), np.zeros(2), (1,),
            {1: np.array([p1, p1])}, flops,
        )

    tagged = [("diverse", rep(10**f, 0.1 * f)) for f in (9, 10, 11)]
    out = hn.scaling_report(tagged, k=1)
    assert math.isclose(out["fits"]["diverse"]["slope"], 0.1, abs_tol=1e-9)
    with pytest.raises(hn.HarnessError, match="distinct FLOPs"):
        hn.scaling_report([("diverse", rep(1e9, 0.5))])


# -- file round-trips --------------------------------------------------------


def test_candidate_file_roundtrip(tmp_path):
    sets = [
        hn.CandidateSet(0, ["sin(x)", "x"], 0.8, 3, "m1", 1e12),
        hn.CandidateSet(1, [], 0.8, 3, "m1", 1e12),
    ]
    path = tmp_path / "cands.jsonl"
    hn.write_candidate_file(path, sets)
    back = hn.load_candidate_file(path)
    assert back == sets
    path.write_text("garbage\n")
    with pytest.raises(hn.HarnessError, match=":1:"):
        hn.load_candidate_file(path)


def test_report_csv(tmp_path):
    tasks = [make_task("x", 0)]
    report = hn.evaluate_run(tasks, [hn.CandidateSet(0, ["x"] * 10)], ks=(1, 10))
    path = tmp_path / "r.csv"
    hn.write_report_csv(path, report)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["task_id"] == "0" and rows[0]["solved"] == "1"
    assert float(rows[0]["pass_at_1"]) == 1.0

    nn = hn.nn_distance_report(
        [1], [0], np.zeros((2, 2), dtype=np.float32),
        np.zeros((2, 2), dtype=np.float32), [False],
    )
    hn.write_nn_report_csv(tmp_path / "nn.csv", nn)
    with open(tmp_path / "nn.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["solved"] == "0" and float(rows[0]["d_sem"]) == 0.0
