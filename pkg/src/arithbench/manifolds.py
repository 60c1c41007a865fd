"""Dual 32-dim embedding spaces over the program universe.

Semantic: evaluate each program on a fixed grid, z-score the outputs
(shape, not magnitude), impute invalid points, and project with PCA.
Syntactic: decompose the AST into PQ-Grams, feature-hash the multiset
into a signed sparse vector, project with truncated SVD, and L2
normalize.  Both metrics are plain Euclidean distance.
"""

from __future__ import annotations

import json
import struct
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from sklearn.decomposition import TruncatedSVD

from . import kernels
from .evaluator import DEFAULT_SEMANTIC_GRID_SIZE, make_grid
from .grammar import (
    BINARY_SYMBOLS,
    Node,
    OP_VAR,
    UNARY_NAMES,
    to_postfix,
)
from .universe import Universe

DEFAULT_DIM = 32
DEFAULT_HASH_DIM = 65_536
DEFAULT_FIT_SAMPLE = 1_000_000
_CHUNK = 65_536

# Dummy pad label for PQ-Grams; must stay distinct from every operator
# symbol (notably "*", which is multiplication here).
DUMMY = "_"
VAR_LABEL = "x"


class DegenerateRankWarning(UserWarning):
    pass


def distance(a, b) -> np.float32:
    """Euclidean distance between two embedding vectors."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return np.float32(np.sqrt(np.sum((a.astype(np.float64) - b.astype(np.float64)) ** 2)))


# ---------------------------------------------------------------------------
# semantic manifold
# ---------------------------------------------------------------------------


def zscore(y) -> np.ndarray:
    """Zero-mean, unit population-std standardization; constant -> zeros."""
    y = np.asarray(y, dtype=np.float32)
    y64 = y.astype(np.float64)
    mu = y64.mean()
    sigma = y64.std()
    if sigma == 0.0:
        return np.zeros_like(y)
    return ((y64 - mu) / sigma).astype(np.float32)


def semantic_features(raw: np.ndarray) -> np.ndarray:
    """Grid outputs (N, G) -> PCA input features (N, G+1).

    Per row: z-score over the valid (finite) points, impute 0 at invalid
    points, and append the valid fraction as an extra feature.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float32))
    n, g = raw.shape
    valid = np.isfinite(raw)
    y = np.where(valid, raw, 0.0).astype(np.float64)
    counts = valid.sum(axis=1)
    safe = np.maximum(counts, 1)
    mu = y.sum(axis=1) / safe
    var = (np.where(valid, (y - mu[:, None]) ** 2, 0.0)).sum(axis=1) / safe
    sigma = np.sqrt(var)
    nonconst = sigma > 0.0
    z = np.zeros((n, g), dtype=np.float64)
    z[nonconst] = (y[nonconst] - mu[nonconst, None]) / sigma[nonconst, None]
    z[~valid] = 0.0
    out = np.empty((n, g + 1), dtype=np.float32)
    out[:, :g] = z
    out[:, g] = counts / g
    return out


@dataclass
class SemanticModel:
    """PCA over z-scored, imputed grid outputs."""

    grid: np.ndarray  # (G,) float32 evaluation grid
    mean: np.ndarray  # (G+1,) float64 feature mean
    components: np.ndarray  # (d, G+1) float64, row-orthonormal
    explained_variance: np.ndarray  # (d,) float64, non-increasing

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features).astype(np.float64)
        return ((x - self.mean) @ self.components.T).astype(np.float32)


def _fit_subsample(n: int, sample_size: int, seed: int) -> np.ndarray:
    if n <= sample_size:
        return np.arange(n)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return np.sort(rng.choice(n, size=sample_size, replace=False))


def _principal_components(total, xtx, count, d):
    mean = total / count
    cov = xtx / count - np.outer(mean, mean)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d]
    components = eigvecs[:, order].T.copy()
    explained = np.maximum(eigvals[order], 0.0)
    rank = int((explained > 1e-12 * max(explained[0], 1e-30)).sum())
    if rank < d:
        warnings.warn(
            f"covariance rank {rank} < requested dimension {d}", DegenerateRankWarning
        )
    # Deterministic sign: largest-magnitude coordinate of each component > 0.
    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return mean, components, explained


def fit_semantic(
    u: Universe,
    grid_size: int = DEFAULT_SEMANTIC_GRID_SIZE,
    d: int = DEFAULT_DIM,
    seed: int = 0,
    sample_size: int = DEFAULT_FIT_SAMPLE,
) -> SemanticModel:
    """PCA fit on a seeded uniform subsample of the universe's grid outputs."""
    grid = make_grid(grid_size, u.domain.lo, u.domain.hi)
    ids = _fit_subsample(len(u), sample_size, seed)
    g1 = grid_size + 1
    total = np.zeros(g1)
    xtx = np.zeros((g1, g1))
    for start in range(0, len(ids), _CHUNK):
        sel = ids[start : start + _CHUNK]
        raw = kernels.eval_grid_batch(u.codes[sel], u.lengths[sel], grid)
        feats = semantic_features(raw).astype(np.float64)
        total += feats.sum(axis=0)
        xtx += feats.T @ feats
    mean, components, explained = _principal_components(total, xtx, len(ids), d)
    return SemanticModel(grid, mean, components, explained)


def semantic_embed(ast: Node, m: SemanticModel) -> np.ndarray:
    codes = to_postfix(ast)[None, :]
    lengths = np.array([codes.shape[1]], dtype=np.int32)
    raw = kernels.eval_grid_batch(codes, lengths, m.grid)
    return m.transform(semantic_features(raw))[0]


def embed_universe_semantic(u: Universe, m: SemanticModel) -> np.ndarray:
    out = np.empty((len(u), m.dim), dtype=np.float32)
    for start in range(0, len(u), _CHUNK):
        stop = min(start + _CHUNK, len(u))
        raw = kernels.eval_grid_batch(u.codes[start:stop], u.lengths[start:stop], m.grid)
        out[start:stop] = m.transform(semantic_features(raw))
    return out


# ---------------------------------------------------------------------------
# syntactic manifold
# ---------------------------------------------------------------------------


def _node_label(node: Node) -> str:
    if node.code == OP_VAR:
        return VAR_LABEL
    if node.code <= 5:
        return UNARY_NAMES[node.code - 1]
    return BINARY_SYMBOLS[node.code - 6]


def pq_grams(ast: Node, p: int = kernels.PQ_P, q: int = kernels.PQ_Q) -> Counter:
    """Multiset of PQ-Grams: (p-long ancestor stem | q-long child window),
    dummy-padded; leaves contribute a single all-dummy window."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    grams: Counter = Counter()

    def walk(node: Node, ancestors: tuple[str, ...]):
        stem = ((DUMMY,) * p + ancestors + (_node_label(node),))[-p:]
        kids = node.children
        if not kids:
            grams[stem + (DUMMY,) * q] += 1
        else:
            labels = (DUMMY,) * (q - 1) + tuple(_node_label(k) for k in kids) + (DUMMY,) * (q - 1)
            for w in range(len(kids) + q - 1):
                grams[stem + labels[w : w + q]] += 1
        child_anc = (ancestors + (_node_label(node),))[-(p - 1) :] if p > 1 else ()
        for k in kids:
            walk(k, child_anc)

    walk(ast, ())
    return grams


_LABEL_IDS = {DUMMY: 0, VAR_LABEL: 1}
_LABEL_IDS.update({name: i + 2 for i, name in enumerate(UNARY_NAMES)})
_LABEL_IDS.update({sym: i + 7 for i, sym in enumerate(BINARY_SYMBOLS)})


def _gram_id(gram: tuple[str, ...]) -> int:
    gid = 0
    for label in gram:
        gid = gid * 11 + _LABEL_IDS[label]
    return gid


def hash_profile(grams, h: int = DEFAULT_HASH_DIM, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of a PQ-Gram multiset -> dense length-h vector."""
    if h & (h - 1):
        raise ValueError("hash dimension must be a power of two")
    out = np.zeros(h, dtype=np.float32)
    items = grams.items() if isinstance(grams, Counter) else Counter(grams).items()
    for gram, count in items:
        hv = kernels.hash_u64(np.uint64(_gram_id(gram)), seed)
        bucket = int(hv & np.uint64(h - 1))
        sign = 1.0 if int(hv >> np.uint64(32)) & 1 else -1.0
        out[bucket] += sign * count
    return out


@dataclass
class SyntacticModel:
    """Truncated SVD over signed hashed PQ-Gram profiles."""

    p: int
    q: int
    hash_dim: int
    hash_seed: int
    components: np.ndarray  # (d, H) float32
    singular_values: np.ndarray  # (d,) float64, non-increasing

    @property
    def dim(self) -> int:
        return self.components.shape[0]


def _profile_matrix(codes, lengths, h: int, hash_seed: int) -> sparse.csr_matrix:
    indptr, buckets, signs = kernels.gram_buckets_batch(codes, lengths, hash_seed, h)
    mat = sparse.csr_matrix((signs, buckets, indptr), shape=(len(lengths), h))
    mat.sum_duplicates()
    return mat


def fit_syntactic(
    u: Universe,
    p: int = kernels.PQ_P,
    q: int = kernels.PQ_Q,
    h: int = DEFAULT_HASH_DIM,
    d: int = DEFAULT_DIM,
    seed: int = 0,
    sample_size: int = DEFAULT_FIT_SAMPLE,
) -> SyntacticModel:
    """Randomized truncated SVD on the hashed-profile matrix of a seeded
    uniform subsample."""
    if (p, q) != (kernels.PQ_P, kernels.PQ_Q):
        raise NotImplementedError(
            f"bulk kernels are specialized to (p, q) = ({kernels.PQ_P}, {kernels.PQ_Q})"
        )
    ids = _fit_subsample(len(u), sample_size, seed)
    mat = _profile_matrix(u.codes[ids], u.lengths[ids], h, seed)
    svd = TruncatedSVD(n_components=d, algorithm="randomized", random_state=seed)
    svd.fit(mat)
    sv = svd.singular_values_
    if (sv > 1e-9 * max(sv[0], 1e-30)).sum() < d:
        warnings.warn(f"profile matrix rank below {d}", DegenerateRankWarning)
    components = svd.components_.astype(np.float32)
    # Deterministic sign convention, matching the semantic model.
    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return SyntacticModel(p, q, h, seed, components, sv.astype(np.float64))


def _normalize_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(raw.astype(np.float64), axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = (raw / safe[:, None].astype(np.float32)).astype(np.float32)
    unit[zero] = 0.0
    return unit, zero


def syntactic_embed(ast: Node, m: SyntacticModel) -> np.ndarray:
    profile = hash_profile(pq_grams(ast, m.p, m.q), m.hash_dim, m.hash_seed)
    raw = (profile[None, :] @ m.components.T).astype(np.float32)
    unit, zero = _normalize_rows(raw)
    if zero[0]:
        warnings.warn("zero syntactic projection; embedding flagged as zero vector")
    return unit[0]


def embed_universe_syntactic(u: Universe, m: SyntacticModel) -> tuple[np.ndarray, np.ndarray]:
    """All-universe unit-norm syntactic rows plus a zero-projection flag."""
    basis = np.ascontiguousarray(m.components.T)  # (H, d)
    out = np.empty((len(u), m.dim), dtype=np.float32)
    zero_flags = np.zeros(len(u), dtype=bool)
    for start in range(0, len(u), _CHUNK):
        stop = min(start + _CHUNK, len(u))
        raw = kernels.syn_project_batch(
            u.codes[start:stop], u.lengths[start:stop], basis, m.hash_seed
        )
        unit, zero = _normalize_rows(raw)
        out[start:stop] = unit
        zero_flags[start:stop] = zero
    if zero_flags.any():
        warnings.warn(f"{int(zero_flags.sum())} programs had zero syntactic projections")
    return out, zero_flags


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

PMEM_MAGIC = b"PMEM"
PMEM_VERSION = 1
_TAGS = {"sem": 0, "syn": 1}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


def save_embedding_matrix(path, manifold: str, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(PMEM_MAGIC)
        fh.write(struct.pack("<IBQI", PMEM_VERSION, _TAGS[manifold], rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def load_embedding_matrix(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PMEM_MAGIC:
            raise ValueError(f"not an embedding file (magic {magic!r})")
        version, tag, count, dim = struct.unpack("<IBQI", fh.read(17))
        if version != PMEM_VERSION:
            raise ValueError(f"unsupported embedding version {version}")
        data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    return _TAG_NAMES[tag], data.copy()


def save_model(path, model: SemanticModel | SyntacticModel) -> None:
    """Persist a fitted manifold model (magic "PMMO", versioned, little-endian)."""
    if isinstance(model, SemanticModel):
        params = {"kind": "sem"}
        arrays = {
            "grid": model.grid,
            "mean": model.mean,
            "components": model.components,
            "explained_variance": model.explained_variance,
        }
    else:
        params = {
            "kind": "syn",
            "p": model.p,
            "q": model.q,
            "hash_dim": model.hash_dim,
            "hash_seed": model.hash_seed,
        }
        arrays = {"components": model.components, "singular_values": model.singular_values}
    blob = json.dumps(params).encode()
    with open(path, "wb") as fh:
        fh.write(b"PMMO")
        fh.write(struct.pack("<II", PMEM_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            nb = name.encode()
            dt = arr.dtype.str.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", len(dt)) + dt)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path) -> SemanticModel | SyntacticModel:
    with open(path, "rb") as fh:
        if fh.read(4) != b"PMMO":
            raise ValueError("not a manifold model file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != PMEM_VERSION:
            raise ValueError(f"unsupported model version {version}")
        params = json.loads(fh.read(blob_len))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (dlen,) = struct.unpack("<I", fh.read(4))
            dtype = np.dtype(fh.read(dlen).decode())
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            arr = np.frombuffer(fh.read(int(np.prod(shape)) * dtype.itemsize), dtype=dtype)
            arrays[name] = arr.reshape(shape).copy()
    if params["kind"] == "sem":
        return SemanticModel(
            arrays["grid"], arrays["mean"], arrays["components"], arrays["explained_variance"]
        )
    return SyntacticModel(
        params["p"],
        params["q"],
        params["hash_dim"],
        params["hash_seed"],
        arrays["components"],
        arrays["singular_values"],
    )
