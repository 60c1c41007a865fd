import json
import math

import numpy as np
import pytest
import torch

from arithtrainer import cli, data, generate, model, train, vocab


def small_model_cfg(v, **kw):
    base = dict(
        vocab_size=v.size, d_model=32, n_heads=2, n_layers=1, d_ff=64,
        n_pairs=8, max_len=24, dropout=0.0,
    )
    base.update(kw)
    return model.ModelConfig(**base)


def make_task(task_id, source, fn, n_pairs=12):
    xs = np.linspace(-2, 2, n_pairs).astype(np.float32)
    ys = fn(xs).astype(np.float32)
    return data.TaskExample(task_id, source, np.stack([xs, ys], axis=1))


@pytest.fixture()
def corpus():
    makers = [
        ("x", lambda x: x),
        ("sin(x)", np.sin),
        ("cos(x)", np.cos),
        ("(x+x)", lambda x: x + x),
        ("(x*x)", lambda x: x * x),
        ("sqrt(x)", lambda x: np.sqrt(np.abs(x))),
    ]
    return [make_task(i, src, fn) for i, (src, fn) in enumerate(makers * 5)]


# -- vocabulary --------------------------------------------------------------


def test_vocab_roundtrip():
    v = vocab.Vocab.default()
    for src in ["x", "sin(x)", "((x*x)/sqrt(x))", "log(exp(cos(x)))"]:
        assert v.decode(v.encode(src)) == src


def test_vocab_rejects_unknown_and_duplicates():
    v = vocab.Vocab.default()
    with pytest.raises(ValueError, match="not in vocabulary"):
        v.encode("y")
    with pytest.raises(ValueError, match="duplicate"):
        vocab.Vocab("xx")


def test_vocab_decode_stops_at_eos():
    v = vocab.Vocab.default()
    ids = v.encode("sin") + [vocab.EOS] + v.encode("(x)")
    assert v.decode(ids) == "sin"


def test_vocab_from_sources():
    v = vocab.Vocab.from_sources(["(x+x)", "sin(x)"])
    assert set(v.alphabet) == set("(x+)sin")
    assert v.size == len(set("(x+)sin")) + vocab.N_SPECIALS
    with pytest.raises(ValueError):
        vocab.Vocab.from_sources([])


# -- data --------------------------------------------------------------------


def test_load_tasks_roundtrip(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(
        '{"task_id":3,"source":"sin(x)","spec":[[0.5,0.47942554],[1.0,0.84147096]]}\n'
    )
    tasks = data.load_tasks(path)
    assert tasks[0].task_id == 3 and tasks[0].source == "sin(x)"
    assert tasks[0].spec.shape == (2, 2)
    path.write_text('{"task_id":1,"source":"x","spec":[[1.0]]}\n')
    with pytest.raises(ValueError, match=":1:"):
        data.load_tasks(path)
    path.write_text("")
    with pytest.raises(ValueError, match="no tasks"):
        data.load_tasks(path)


def test_encode_specs_pads_cyclically():
    t = make_task(0, "x", lambda x: x, n_pairs=3)
    enc = data.encode_specs([t], n_pairs=8)
    assert enc.shape == (1, 8, 2)
    assert torch.equal(enc[0, 3], enc[0, 0])
    assert torch.equal(enc[0, :3], enc[0, 3:6])
    # truncation path
    enc = data.encode_specs([t], n_pairs=2)
    assert enc.shape == (1, 2, 2)


def test_normalize_spec_compresses_range():
    spec = np.array([[1e30, -1e30], [0.0, 2.0]], dtype=np.float32)
    norm = data.normalize_spec(spec)
    assert np.isfinite(norm).all()
    assert abs(norm[0, 0]) < 100
    assert norm[0, 1] == -norm[0, 0]
    assert abs(norm[1, 1] - math.asinh(2.0)) < 1e-6


def test_encode_targets_frames_and_caps():
    v = vocab.Vocab.default()
    t = make_task(0, "sin(x)", np.sin)
    ids = data.encode_targets([t], v, max_len=10)
    assert ids.shape == (1, 11)
    assert ids[0, 0] == vocab.BOS
    assert ids[0, 7] == vocab.EOS  # 6 chars + BOS
    assert (ids[0, 8:] == vocab.PAD).all()
    with pytest.raises(ValueError, match="exceeds"):
        data.encode_targets([t], v, max_len=5)


# -- model -------------------------------------------------------------------


def test_model_config_validation():
    v = vocab.Vocab.default()
    with pytest.raises(ValueError, match="divide"):
        small_model_cfg(v, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        small_model_cfg(v, max_len=1)


def test_forward_shapes_and_flops(corpus):
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    spec = data.encode_specs(corpus[:4], 8)
    tgt = data.encode_targets(corpus[:4], v, 24)
    logits = m(spec, tgt[:, :-1])
    assert logits.shape == (4, 24, v.size)
    assert m.n_params() > 0
    assert model.estimate_flops(m.n_params(), 1000) == 6.0 * m.n_params() * 1000


def test_sampling_is_seeded_and_capped(corpus):
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    spec = data.encode_specs(corpus[:2], 8)
    a = m.sample(spec, n=3, temperature=0.8, generator=torch.Generator().manual_seed(1))
    b = m.sample(spec, n=3, temperature=0.8, generator=torch.Generator().manual_seed(1))
    c = m.sample(spec, n=3, temperature=0.8, generator=torch.Generator().manual_seed(2))
    assert a == b and a != c
    assert len(a) == 6
    assert all(len(row) <= m.cfg.max_len - 1 for row in a)
    with pytest.raises(ValueError):
        m.sample(spec, temperature=0.0)


def test_checkpoint_roundtrip(tmp_path, corpus):
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    model.save_checkpoint(tmp_path / "m.pt", m, v, {"flops": 123.0})
    back, v2, extra = model.load_checkpoint(tmp_path / "m.pt")
    assert v2.alphabet == v.alphabet and extra["flops"] == 123.0
    spec = data.encode_specs(corpus[:2], 8)
    tgt = data.encode_targets(corpus[:2], v, 24)
    m.eval(), back.eval()
    with torch.no_grad():
        assert torch.equal(m(spec, tgt[:, :-1]), back(spec, tgt[:, :-1]))


# -- training ----------------------------------------------------------------


def test_training_reduces_loss(corpus):
    v = vocab.Vocab.default()
    result = train.train(
        corpus, corpus[:6], small_model_cfg(v),
        train.TrainConfig(lr=3e-3, batch_size=8, max_epochs=8, warmup_steps=5, seed=0),
        v,
    )
    first, last = result.history[0], result.history[-1]
    assert last["train_loss"] < first["train_loss"]
    assert math.isfinite(result.best_val_loss)
    assert result.tokens > 0 and result.steps > 0
    assert result.flops == 6.0 * result.model.n_params() * result.tokens


def test_training_early_stops(corpus):
    v = vocab.Vocab.default()
    result = train.train(
        corpus, corpus[:6], small_model_cfg(v),
        train.TrainConfig(lr=0.0, batch_size=8, max_epochs=30, patience=2, seed=0),
        v,
    )
    # zero lr: no improvement after epoch 1, so patience ends the run early
    assert result.epochs <= 4


def test_training_aborts_on_divergence(corpus):
    bad = make_task(99, "x", lambda x: x)
    bad.spec[0, 1] = np.inf
    v = vocab.Vocab.default()
    with pytest.raises(train.TrainingDiverged):
        train.train(
            corpus + [bad], corpus[:4], small_model_cfg(v),
            train.TrainConfig(batch_size=64, max_epochs=1), v,
        )


def test_training_rejects_vocab_mismatch(corpus):
    v = vocab.Vocab.default()
    cfg = small_model_cfg(v, vocab_size=v.size + 1)
    with pytest.raises(ValueError, match="vocab_size"):
        train.train(corpus, corpus[:4], cfg, train.TrainConfig(max_epochs=1), v)


# -- generation and file format ----------------------------------------------


def test_candidate_file_format(tmp_path, corpus):
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    rows = generate.generate_candidates(m, v, corpus[:3], n=4, seed=5)
    assert [r["task_id"] for r in rows] == [0, 1, 2]
    assert all(len(r["candidates"]) == 4 for r in rows)
    path = tmp_path / "c.jsonl"
    generate.write_candidate_file(path, rows, 0.8, 5, "tiny", 1e9)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert set(lines[0]) == {
        "task_id", "candidates", "temperature", "seed", "model_id", "flops",
    }
    assert lines[0]["temperature"] == 0.8 and lines[0]["flops"] == 1e9


def test_generation_is_deterministic(corpus):
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    a = generate.generate_candidates(m, v, corpus[:3], n=3, seed=7)
    b = generate.generate_candidates(m, v, corpus[:3], n=3, seed=7)
    assert a == b


def test_harness_reads_trainer_candidates(tmp_path, corpus):
    harness = pytest.importorskip("arithbench.harness")
    v = vocab.Vocab.default()
    m = model.SpecToProgramModel(small_model_cfg(v))
    rows = generate.generate_candidates(m, v, corpus[:2], n=3, seed=0)
    path = tmp_path / "c.jsonl"
    generate.write_candidate_file(path, rows, 0.8, 0, "tiny", 2e9)
    sets = harness.load_candidate_file(path)
    assert [cs.task_id for cs in sets] == [0, 1]
    assert sets[0].flops == 2e9 and sets[0].temperature == 0.8


# -- CLI ---------------------------------------------------------------------


def write_task_file(path, tasks):
    with open(path, "w") as fh:
        for t in tasks:
            spec = [[float(x), float(y)] for x, y in t.spec]
            fh.write(
                json.dumps({"task_id": t.task_id, "source": t.source, "spec": spec})
                + "\n"
            )


def test_cli_train_then_generate(tmp_path, corpus, capsys):
    write_task_file(tmp_path / "train.jsonl", corpus)
    write_task_file(tmp_path / "val.jsonl", corpus[:6])
    rc = cli.main([
        "train",
        "--train", str(tmp_path / "train.jsonl"),
        "--val", str(tmp_path / "val.jsonl"),
        "--out", str(tmp_path / "model.pt"),
        "--d-model", "32", "--n-heads", "2", "--n-layers", "1",
        "--n-pairs", "8", "--max-len", "24", "--max-epochs", "2",
        "--model-id", "tiny",
    ])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["model_id"] == "tiny" and summary["flops"] > 0

    rc = cli.main([
        "generate",
        "--model", str(tmp_path / "model.pt"),
        "--tasks", str(tmp_path / "val.jsonl"),
        "--out", str(tmp_path / "cands.jsonl"),
        "--n", "3",
    ])
    assert rc == 0
    lines = [json.loads(l) for l in (tmp_path / "cands.jsonl").read_text().splitlines()]
    assert len(lines) == 6
    assert lines[0]["model_id"] == "tiny" and len(lines[0]["candidates"]) == 3


def test_cli_reports_errors(tmp_path, capsys):
    rc = cli.main([
        "train", "--train", str(tmp_path / "missing.jsonl"),
        "--val", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "m.pt"),
    ])
    assert rc == 2
