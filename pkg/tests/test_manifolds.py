import warnings
from collections import Counter

import numpy as np
import pytest

from arithbench import grammar as g
from arithbench import kernels
from arithbench import manifolds as mf


def test_distance_examples():
    assert mf.distance([0.0, 0.0], [3.0, 4.0]) == np.float32(5.0)
    assert mf.distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        mf.distance([1.0], [1.0, 2.0])


def test_zscore():
    z = mf.zscore([1.0, 2.0, 3.0, 4.0])
    assert abs(float(z.mean())) < 1e-7
    assert abs(float((z.astype(np.float64) ** 2).mean()) - 1.0) < 1e-6
    assert np.array_equal(mf.zscore([5.0, 5.0, 5.0]), np.zeros(3, dtype=np.float32))


def test_semantic_features_valid_fraction():
    raw = np.array([[1.0, np.nan, 3.0, np.inf]], dtype=np.float32)
    feats = mf.semantic_features(raw)
    assert feats.shape == (1, 5)
    assert feats[0, -1] == np.float32(0.5)
    assert feats[0, 1] == 0.0 and feats[0, 3] == 0.0  # imputed


def test_pq_gram_counts():
    assert sum(mf.pq_grams(g.parse("x")).values()) == 1
    assert sum(mf.pq_grams(g.parse("sin(x)")).values()) == 4
    grams = mf.pq_grams(g.parse("(x+x)"))
    assert sum(grams.values()) == 6
    # the two identical leaves fold into one gram with multiplicity 2
    leaf = tuple(k for k, v in grams.items() if v == 2)
    assert len(leaf) == 1
    d = mf.DUMMY
    assert leaf[0] == ("+", "x", d, d, d)
    assert grams[(d, "+", d, d, "x")] == 1
    assert grams[(d, "+", d, "x", "x")] == 1
    assert grams[(d, "+", "x", "x", d)] == 1
    assert grams[(d, "+", "x", d, d)] == 1


def test_dummy_label_is_not_an_operator():
    assert mf.DUMMY not in g.UNARY_NAMES
    assert mf.DUMMY not in g.BINARY_SYMBOLS
    assert mf.DUMMY != mf.VAR_LABEL


def test_hash_profile_matches_kernel_path():
    for src in ["x", "sin(x)", "(x+x)", "((x*x)/sqrt(x))", "log(((x/x)-exp(x)))"]:
        ast = g.parse(src)
        py = mf.hash_profile(mf.pq_grams(ast), 65536, seed=9)
        codes = g.to_postfix(ast)[None, :]
        lengths = np.array([codes.shape[1]], dtype=np.int32)
        kern = np.asarray(
            mf._profile_matrix(codes, lengths, 65536, 9).todense()
        ).ravel()
        assert np.array_equal(py, kern)


def test_hash_profile_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        mf.hash_profile(Counter(), 100)


def test_semantic_model_shapes(sem_model4, sem4):
    assert sem_model4.dim == 32
    assert sem_model4.components.shape[1] == len(sem_model4.grid) + 1
    # components are orthonormal rows
    gram = sem_model4.components @ sem_model4.components.T
    assert np.allclose(gram, np.eye(32), atol=1e-8)
    assert (np.diff(sem_model4.explained_variance) <= 1e-12).all()
    assert sem4.shape == (len(sem4), 32) and sem4.dtype == np.float32


def test_equivalent_programs_coincide_semantically(u4, classes4, sem4):
    sizes = np.diff(classes4.class_offsets)
    rng = np.random.default_rng(0)
    for c in rng.choice(np.flatnonzero(sizes > 1), size=50, replace=False):
        ids = classes4.members(int(c))
        assert np.array_equal(sem4[ids], np.broadcast_to(sem4[ids[0]], sem4[ids].shape))


def test_witness_pair_sem_zero_syn_positive(u4, source_index4, sem_model4, syn_model4):
    a, b = g.parse("(x-x)"), g.parse("sin((x-x))")
    ea, eb = mf.semantic_embed(a, sem_model4), mf.semantic_embed(b, sem_model4)
    assert mf.distance(ea, eb) == 0.0
    sa, sb = mf.syntactic_embed(a, syn_model4), mf.syntactic_embed(b, syn_model4)
    assert mf.distance(sa, sb) > 0.0


def test_syntactic_rows_unit_norm(syn4):
    rows, zero_flags = syn4
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    assert np.abs(norms[~zero_flags] - 1.0).max() < 1e-4
    assert (norms[zero_flags] == 0.0).all()


def test_syntactic_singular_values_non_increasing(syn_model4):
    assert (np.diff(syn_model4.singular_values) <= 1e-9).all()
    assert syn_model4.components.shape == (32, syn_model4.hash_dim)


def test_syntactic_embed_matches_bulk(u4, syn_model4, syn4):
    rows, _ = syn4
    for i in [0, 17, 1234, len(u4) - 1]:
        single = mf.syntactic_embed(u4.ast(i), syn_model4)
        assert np.allclose(single, rows[i], atol=1e-5)


def test_shared_structure_is_closer_syntactically(syn_model4):
    base = g.parse("(x+x)")
    near = g.parse("(x+sin(x))")  # shares the + spine with base
    far = g.parse("sin(sin(x))")
    d_near = mf.distance(
        mf.syntactic_embed(base, syn_model4), mf.syntactic_embed(near, syn_model4)
    )
    d_far = mf.distance(
        mf.syntactic_embed(base, syn_model4), mf.syntactic_embed(far, syn_model4)
    )
    assert d_near < d_far


def test_more_components_reconstruct_no_worse(u3):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mf.DegenerateRankWarning)
        m8 = mf.fit_syntactic(u3, d=8, seed=3)
        m32 = mf.fit_syntactic(u3, d=32, seed=3)
    mat = mf._profile_matrix(u3.codes, u3.lengths, m32.hash_dim, m32.hash_seed)
    dense = np.asarray(mat.todense(), dtype=np.float64)

    def residual(model):
        v = model.components.astype(np.float64)
        return np.linalg.norm(dense - (dense @ v.T) @ v)

    assert residual(m32) <= residual(m8) + 1e-9


def test_fits_are_deterministic(u3):
    a = mf.fit_semantic(u3, seed=5)
    b = mf.fit_semantic(u3, seed=5)
    assert np.array_equal(a.components, b.components)
    assert np.array_equal(a.mean, b.mean)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mf.DegenerateRankWarning)
        c = mf.fit_syntactic(u3, seed=5)
        d = mf.fit_syntactic(u3, seed=5)
    assert np.array_equal(c.components, d.components)


def test_model_roundtrip(tmp_path, sem_model4, syn_model4):
    mf.save_model(tmp_path / "sem.pmmo", sem_model4)
    back = mf.load_model(tmp_path / "sem.pmmo")
    assert isinstance(back, mf.SemanticModel)
    assert np.array_equal(back.grid, sem_model4.grid)
    assert np.array_equal(back.mean, sem_model4.mean)
    assert np.array_equal(back.components, sem_model4.components)
    assert np.array_equal(back.explained_variance, sem_model4.explained_variance)

    mf.save_model(tmp_path / "syn.pmmo", syn_model4)
    back = mf.load_model(tmp_path / "syn.pmmo")
    assert isinstance(back, mf.SyntacticModel)
    assert (back.p, back.q, back.hash_dim, back.hash_seed) == (
        syn_model4.p,
        syn_model4.q,
        syn_model4.hash_dim,
        syn_model4.hash_seed,
    )
    assert np.array_equal(back.components, syn_model4.components)
    assert np.array_equal(back.singular_values, syn_model4.singular_values)


def test_embedding_matrix_roundtrip(tmp_path, sem4, syn4):
    mf.save_embedding_matrix(tmp_path / "sem.pmem", "sem", sem4)
    tag, rows = mf.load_embedding_matrix(tmp_path / "sem.pmem")
    assert tag == "sem"
    assert np.array_equal(rows, sem4)
    mf.save_embedding_matrix(tmp_path / "syn.pmem", "syn", syn4[0])
    tag, rows = mf.load_embedding_matrix(tmp_path / "syn.pmem")
    assert tag == "syn"
    assert np.array_equal(rows, syn4[0])


def test_metric_axioms_on_sampled_triples(sem4, syn4):
    rng = np.random.default_rng(12)
    for rows in (sem4, syn4[0]):
        idx = rng.integers(0, len(rows), size=(2000, 3))
        a, b, c = (rows[idx[:, j]].astype(np.float64) for j in range(3))
        dab = np.linalg.norm(a - b, axis=1)
        dba = np.linalg.norm(b - a, axis=1)
        dac = np.linalg.norm(a - c, axis=1)
        dcb = np.linalg.norm(c - b, axis=1)
        assert np.array_equal(dab, dba)
        assert (dab >= 0).all()
        assert (dab <= dac + dcb + 1e-5).all()
