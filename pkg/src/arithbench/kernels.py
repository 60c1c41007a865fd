"""Hot numeric kernels: batch program evaluation and PQ-Gram hashing.

Programs arrive as fixed-width postfix opcode rows (see grammar.py).
Every kernel exists twice: a numba @njit version and a pure-numpy
fallback.  The backend is chosen once at import time from the
ARITHBENCH_BACKEND environment variable ("numba" or "numpy"; default is
numba when importable).  Both paths are bit-identical: float32
arithmetic is IEEE in both, and unary functions are computed as
float32(libm_f(float64(x))) on both sides.
"""

from __future__ import annotations

import os

import numpy as np

from .grammar import CODE_PAD, OP_VAR

_ENV_BACKEND = os.environ.get("ARITHBENCH_BACKEND", "").strip().lower()

if _ENV_BACKEND not in ("", "numba", "numpy"):
    raise ValueError(f"ARITHBENCH_BACKEND must be 'numba' or 'numpy', got {_ENV_BACKEND!r}")

_numba = None
if _ENV_BACKEND != "numpy":
    try:
        import numba as _numba
    except ImportError:
        if _ENV_BACKEND == "numba":
            raise

BACKEND = "numba" if _numba is not None else "numpy"

# PQ-Gram defaults; the numba gram kernel is specialized to these.
PQ_P = 2
PQ_Q = 3
MAX_TOKENS = 13  # token_width(6)
MAX_GRAMS = 4 * MAX_TOKENS

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_M2 = np.uint64(0x94D049BB133111EB)


def hash_u64(x: np.ndarray | int, seed: int) -> np.ndarray | int:
    """splitmix64 finalizer over x xor a seed-derived gamma (vectorized)."""
    with np.errstate(over="ignore"):
        z = (np.uint64(x) ^ (np.uint64(seed) * _SPLITMIX_GAMMA)) + _SPLITMIX_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SPLITMIX_M1
        z = (z ^ (z >> np.uint64(27))) * _SPLITMIX_M2
        return z ^ (z >> np.uint64(31))


# ---------------------------------------------------------------------------
# pure-numpy reference path
# ---------------------------------------------------------------------------

_UNARY_FNS = (np.sin, np.cos, np.exp, np.log, np.sqrt)


def _eval_postfix_numpy(codes_row, length, xs32) -> np.ndarray:
    """Evaluate one postfix program over a float32 vector of inputs."""
    stack = []
    with np.errstate(all="ignore"):
        for t in range(length):
            c = int(codes_row[t])
            if c == OP_VAR:
                stack.append(xs32)
            elif c <= 5:
                v = stack.pop()
                stack.append(_UNARY_FNS[c - 1](v.astype(np.float64)).astype(np.float32))
            else:
                b = stack.pop()
                a = stack.pop()
                if c == 6:
                    stack.append(a + b)
                elif c == 7:
                    stack.append(a - b)
                elif c == 8:
                    stack.append(a * b)
                else:
                    stack.append(a / b)
    return stack[-1]


def _eval_grid_numpy(codes, lengths, grid):
    out = np.empty((len(lengths), len(grid)), dtype=np.float32)
    for i in range(len(lengths)):
        out[i] = _eval_postfix_numpy(codes[i], int(lengths[i]), grid)
    return out


def _eval_rows_numpy(codes, lengths, xs):
    out = np.empty(xs.shape, dtype=np.float32)
    for i in range(len(lengths)):
        out[i] = _eval_postfix_numpy(codes[i], int(lengths[i]), xs[i])
    return out


def _gram_ids_row_numpy(codes_row, length):
    """PQ-Gram ids (base-11 packed, p=2, q=3) for one postfix program."""
    labels = np.empty(length, dtype=np.int64)
    parent = np.full(length, -1, dtype=np.int64)
    children: list[list[int]] = [[] for _ in range(length)]
    stack: list[int] = []
    for t in range(length):
        c = int(codes_row[t])
        labels[t] = c + 1  # 0 is the dummy label
        if c == OP_VAR:
            stack.append(t)
        elif c <= 5:
            ch = stack.pop()
            parent[ch] = t
            children[t] = [ch]
            stack.append(t)
        else:
            r = stack.pop()
            l = stack.pop()
            parent[l] = t
            parent[r] = t
            children[t] = [l, r]
            stack.append(t)
    grams = []
    for node in range(length):
        anc = 0 if parent[node] < 0 else int(labels[parent[node]])
        stem = (anc * 11 + int(labels[node])) * 11
        kids = children[node]
        ext = [0, 0] + [int(labels[k]) for k in kids] + [0, 0]
        n_windows = 1 if not kids else len(kids) + PQ_Q - 1
        for w in range(n_windows):
            gid = ((stem + ext[w]) * 11 + ext[w + 1]) * 11 + ext[w + 2]
            grams.append(gid)
    return grams


def _syn_project_numpy(codes, lengths, basis, hash_seed):
    n, d = len(lengths), basis.shape[1]
    h = basis.shape[0]
    out = np.zeros((n, d), dtype=np.float32)
    for i in range(n):
        gids = np.asarray(_gram_ids_row_numpy(codes[i], int(lengths[i])), dtype=np.uint64)
        hv = hash_u64(gids, hash_seed)
        buckets = (hv & np.uint64(h - 1)).astype(np.int64)
        signs = np.where((hv >> np.uint64(32)) & np.uint64(1), np.float32(1.0), np.float32(-1.0))
        for b, s in zip(buckets, signs):
            out[i] += s * basis[b]
    return out


def _gram_buckets_numpy(codes, lengths, hash_seed, h):
    indptr = np.zeros(len(lengths) + 1, dtype=np.int64)
    all_buckets: list[np.ndarray] = []
    all_signs: list[np.ndarray] = []
    for i in range(len(lengths)):
        gids = np.asarray(_gram_ids_row_numpy(codes[i], int(lengths[i])), dtype=np.uint64)
        hv = hash_u64(gids, hash_seed)
        all_buckets.append((hv & np.uint64(h - 1)).astype(np.int32))
        all_signs.append(
            np.where((hv >> np.uint64(32)) & np.uint64(1), np.float32(1.0), np.float32(-1.0))
        )
        indptr[i + 1] = indptr[i] + len(gids)
    buckets = np.concatenate(all_buckets) if all_buckets else np.empty(0, np.int32)
    signs = np.concatenate(all_signs) if all_signs else np.empty(0, np.float32)
    return indptr, buckets, signs


def _parse_canonical_row(src, width, codes_row):
    """One-pass canonical-source -> postfix conversion; returns token count.

    Assumes well-formed canonical text (as produced by render); used only
    on build artifacts, never on untrusted candidate strings.
    """
    stack = [0] * MAX_TOKENS
    top = -1
    out = 0
    i = 0
    while i < width:
        ch = src[i]
        if ch == 0:
            break
        if ch == 120:  # 'x'
            codes_row[out] = 0
            out += 1
            i += 1
        elif ch == 40:  # '(' opening a binary application
            top += 1
            stack[top] = CODE_PAD
            i += 1
        elif ch == 41:  # ')'
            codes_row[out] = stack[top]
            out += 1
            top -= 1
            i += 1
        elif ch == 43:  # '+'
            stack[top] = 6
            i += 1
        elif ch == 45:  # '-'
            stack[top] = 7
            i += 1
        elif ch == 42:  # '*'
            stack[top] = 8
            i += 1
        elif ch == 47:  # '/'
            stack[top] = 9
            i += 1
        elif ch == 115:  # 's' -> sin( or sqrt(
            top += 1
            if src[i + 1] == 105:
                stack[top] = 1
                i += 4
            else:
                stack[top] = 5
                i += 5
        elif ch == 99:  # 'c' -> cos(
            top += 1
            stack[top] = 2
            i += 4
        elif ch == 101:  # 'e' -> exp(
            top += 1
            stack[top] = 3
            i += 4
        else:  # 'l' -> log(
            top += 1
            stack[top] = 4
            i += 4
    return out


def _parse_batch_numpy(src_matrix, codes, lengths):
    width = src_matrix.shape[1]
    for i in range(src_matrix.shape[0]):
        lengths[i] = _parse_canonical_row(src_matrix[i], width, codes[i])


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit, prange

    @njit(inline="always")
    def _eval_one(codes_row, length, x):
        stack = np.empty(MAX_TOKENS, dtype=np.float32)
        top = -1
        for t in range(length):
            c = codes_row[t]
            if c == 0:
                top += 1
                stack[top] = x
            elif c <= 5:
                v = np.float64(stack[top])
                if c == 1:
                    r = np.sin(v)
                elif c == 2:
                    r = np.cos(v)
                elif c == 3:
                    r = np.exp(v)
                elif c == 4:
                    r = np.log(v)
                else:
                    r = np.sqrt(v)
                stack[top] = np.float32(r)
            else:
                b = stack[top]
                a = stack[top - 1]
                top -= 1
                if c == 6:
                    stack[top] = a + b
                elif c == 7:
                    stack[top] = a - b
                elif c == 8:
                    stack[top] = a * b
                else:
                    stack[top] = a / b
        return stack[0]

    @njit(parallel=True, cache=True)
    def _eval_grid_numba(codes, lengths, grid, out):
        for i in prange(codes.shape[0]):
            for j in range(grid.shape[0]):
                out[i, j] = _eval_one(codes[i], lengths[i], grid[j])

    @njit(parallel=True, cache=True)
    def _eval_rows_numba(codes, lengths, xs, out):
        for i in prange(codes.shape[0]):
            for j in range(xs.shape[1]):
                out[i, j] = _eval_one(codes[i], lengths[i], xs[i, j])

    @njit(inline="always")
    def _hash_u64_nb(x, seed):
        gamma = np.uint64(0x9E3779B97F4A7C15)
        z = (x ^ (seed * gamma)) + gamma
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @njit(inline="always")
    def _gram_ids_one(codes_row, length, gids):
        """Fill gids with the program's PQ-Gram ids; returns the count."""
        labels = np.empty(MAX_TOKENS, dtype=np.int64)
        parent = np.full(MAX_TOKENS, -1, dtype=np.int64)
        child0 = np.full(MAX_TOKENS, -1, dtype=np.int64)
        child1 = np.full(MAX_TOKENS, -1, dtype=np.int64)
        stack = np.empty(MAX_TOKENS, dtype=np.int64)
        top = -1
        for t in range(length):
            c = codes_row[t]
            labels[t] = np.int64(c) + 1
            if c == 0:
                top += 1
                stack[top] = t
            elif c <= 5:
                ch = stack[top]
                parent[ch] = t
                child0[t] = ch
                stack[top] = t
            else:
                r = stack[top]
                l = stack[top - 1]
                top -= 1
                parent[l] = t
                parent[r] = t
                child0[t] = l
                child1[t] = r
                stack[top] = t
        count = 0
        ext = np.empty(6, dtype=np.int64)
        for node in range(length):
            anc = np.int64(0) if parent[node] < 0 else labels[parent[node]]
            stem = (anc * 11 + labels[node]) * 11
            nkids = 0
            ext[0] = 0
            ext[1] = 0
            if child0[node] >= 0:
                ext[2] = labels[child0[node]]
                nkids = 1
                if child1[node] >= 0:
                    ext[3] = labels[child1[node]]
                    nkids = 2
            ext[2 + nkids] = 0
            ext[3 + nkids] = 0
            n_windows = 1 if nkids == 0 else nkids + PQ_Q - 1
            for w in range(n_windows):
                gids[count] = ((stem + ext[w]) * 11 + ext[w + 1]) * 11 + ext[w + 2]
                count += 1
        return count

    @njit(parallel=True, cache=True)
    def _syn_project_numba(codes, lengths, basis, hash_seed, mask, out):
        for i in prange(codes.shape[0]):
            gids = np.empty(MAX_GRAMS, dtype=np.int64)
            count = _gram_ids_one(codes[i], lengths[i], gids)
            for g in range(count):
                hv = _hash_u64_nb(np.uint64(gids[g]), hash_seed)
                bucket = np.int64(hv & mask)
                sign = np.float32(1.0) if (hv >> np.uint64(32)) & np.uint64(1) else np.float32(-1.0)
                for d in range(out.shape[1]):
                    out[i, d] += sign * basis[bucket, d]

    @njit(parallel=True, cache=True)
    def _parse_batch_numba(src_matrix, codes, lengths):
        width = src_matrix.shape[1]
        for i in prange(src_matrix.shape[0]):
            stack = np.empty(MAX_TOKENS, dtype=np.uint8)
            top = -1
            out = 0
            j = 0
            while j < width:
                ch = src_matrix[i, j]
                if ch == 0:
                    break
                if ch == 120:
                    codes[i, out] = 0
                    out += 1
                    j += 1
                elif ch == 40:
                    top += 1
                    stack[top] = CODE_PAD
                    j += 1
                elif ch == 41:
                    codes[i, out] = stack[top]
                    out += 1
                    top -= 1
                    j += 1
                elif ch == 43:
                    stack[top] = 6
                    j += 1
                elif ch == 45:
                    stack[top] = 7
                    j += 1
                elif ch == 42:
                    stack[top] = 8
                    j += 1
                elif ch == 47:
                    stack[top] = 9
                    j += 1
                elif ch == 115:
                    top += 1
                    if src_matrix[i, j + 1] == 105:
                        stack[top] = 1
                        j += 4
                    else:
                        stack[top] = 5
                        j += 5
                elif ch == 99:
                    top += 1
                    stack[top] = 2
                    j += 4
                elif ch == 101:
                    top += 1
                    stack[top] = 3
                    j += 4
                else:
                    top += 1
                    stack[top] = 4
                    j += 4
            lengths[i] = out

    @njit(cache=True)
    def _gram_counts_numba(codes, lengths, counts):
        gids = np.empty(MAX_GRAMS, dtype=np.int64)
        for i in range(codes.shape[0]):
            counts[i] = _gram_ids_one(codes[i], lengths[i], gids)

    @njit(parallel=True, cache=True)
    def _gram_buckets_numba(codes, lengths, hash_seed, mask, indptr, buckets, signs):
        for i in prange(codes.shape[0]):
            gids = np.empty(MAX_GRAMS, dtype=np.int64)
            count = _gram_ids_one(codes[i], lengths[i], gids)
            base = indptr[i]
            for g in range(count):
                hv = _hash_u64_nb(np.uint64(gids[g]), hash_seed)
                buckets[base + g] = np.int32(hv & mask)
                signs[base + g] = (
                    np.float32(1.0) if (hv >> np.uint64(32)) & np.uint64(1) else np.float32(-1.0)
                )


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def _as_matrix(codes, lengths):
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    lengths = np.ascontiguousarray(lengths, dtype=np.int32)
    if codes.ndim != 2 or codes.shape[0] != lengths.shape[0]:
        raise ValueError("codes must be (N, width) aligned with lengths")
    return codes, lengths


def eval_grid_batch(codes, lengths, grid) -> np.ndarray:
    """Evaluate N programs over one shared float32 grid -> (N, G) float32."""
    codes, lengths = _as_matrix(codes, lengths)
    grid = np.ascontiguousarray(grid, dtype=np.float32)
    if BACKEND == "numba":
        out = np.empty((codes.shape[0], grid.shape[0]), dtype=np.float32)
        _eval_grid_numba(codes, lengths, grid, out)
        return out
    return _eval_grid_numpy(codes, lengths, grid)


def eval_rows_batch(codes, lengths, xs) -> np.ndarray:
    """Evaluate N programs over per-program input rows -> (N, C) float32."""
    codes, lengths = _as_matrix(codes, lengths)
    xs = np.ascontiguousarray(xs, dtype=np.float32)
    if BACKEND == "numba":
        out = np.empty(xs.shape, dtype=np.float32)
        _eval_rows_numba(codes, lengths, xs, out)
        return out
    return _eval_rows_numpy(codes, lengths, xs)


def syn_project_batch(codes, lengths, basis, hash_seed: int) -> np.ndarray:
    """Project hashed PQ-Gram profiles through a (H, d) basis -> (N, d) f32.

    Output rows are the raw (unnormalized) linear images of the signed
    hashed profiles.
    """
    codes, lengths = _as_matrix(codes, lengths)
    basis = np.ascontiguousarray(basis, dtype=np.float32)
    h = basis.shape[0]
    if h & (h - 1):
        raise ValueError("hash dimension must be a power of two")
    if BACKEND == "numba":
        out = np.zeros((codes.shape[0], basis.shape[1]), dtype=np.float32)
        _syn_project_numba(codes, lengths, basis, np.uint64(hash_seed), np.uint64(h - 1), out)
        return out
    return _syn_project_numpy(codes, lengths, basis, hash_seed)


def gram_buckets_batch(codes, lengths, hash_seed: int, h: int):
    """Signed hashed PQ-Gram entries in CSR layout (indptr, buckets, signs).

    Duplicate buckets within a row are left to the caller to accumulate.
    """
    codes, lengths = _as_matrix(codes, lengths)
    if h & (h - 1):
        raise ValueError("hash dimension must be a power of two")
    if BACKEND == "numba":
        counts = np.empty(codes.shape[0], dtype=np.int64)
        _gram_counts_numba(codes, lengths, counts)
        indptr = np.zeros(codes.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        buckets = np.empty(indptr[-1], dtype=np.int32)
        signs = np.empty(indptr[-1], dtype=np.float32)
        _gram_buckets_numba(
            codes, lengths, np.uint64(hash_seed), np.uint64(h - 1), indptr, buckets, signs
        )
        return indptr, buckets, signs
    return _gram_buckets_numpy(codes, lengths, hash_seed, h)


def parse_sources_batch(sources: np.ndarray, max_tokens: int = MAX_TOKENS):
    """Canonical bytes array (S dtype) -> (codes, lengths) postfix matrices."""
    sources = np.ascontiguousarray(sources)
    src_matrix = sources.view(np.uint8).reshape(len(sources), sources.dtype.itemsize)
    codes = np.full((len(sources), max_tokens), CODE_PAD, dtype=np.uint8)
    lengths = np.empty(len(sources), dtype=np.int32)
    if BACKEND == "numba":
        _parse_batch_numba(src_matrix, codes, lengths)
    else:
        _parse_batch_numpy(src_matrix, codes, lengths)
    return codes, lengths


def set_threads(n: int) -> None:
    """Cap kernel parallelism; no-op on the numpy backend."""
    if BACKEND == "numba":
        _numba.set_num_threads(max(1, min(n, _numba.config.NUMBA_NUM_THREADS)))
