"""Train/test split construction over the embedded universe.

Density splits flatten the sampling distribution by drawing programs
with probability proportional to their mean k-nearest-neighbor
distance (sparse regions are over-sampled); the diverse split draws
uniformly over equivalence classes.  Support splits carve each
manifold into a ball around the median centroid (interpolation region)
and its complement (extrapolation region).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import MiniBatchKMeans

from .universe import EquivalenceClassing, Universe

DEFAULT_K = 5
DEFAULT_INSIDE_FRACTION = 0.8
DEFAULT_TRAIN_SIZE = 1_000_000
DEFAULT_TEST_SIZE = 1_000

# Exact all-pairs kNN is quadratic; above this row count the clustered
# approximate path (with its exact audit) takes over.
EXACT_KNN_THRESHOLD = 200_000


class SplitError(ValueError):
    pass


class KnnAuditError(RuntimeError):
    """Approximate kNN failed its exact-subset accuracy audit."""


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(
        f"{seed}:{label}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# k-nearest-neighbor density proxy
# ---------------------------------------------------------------------------


# Gram-form squared distances in float64 carry cancellation noise around
# 1e-12 absolute; any candidate within this band of the k-th smallest gets
# recomputed exactly (difference form) before ranking.
_D2_NOISE_BAND = 1e-9


def _refined_knn(q64, sub64, d2, k, self_pos=None):
    """Exact sorted k-nearest distances (and candidate column ids) per
    query row, selecting via noisy d2 with an adaptive safety band."""
    kth = np.partition(d2, min(k, d2.shape[1] - 1), axis=1)[:, min(k, d2.shape[1] - 1)]
    take = int((d2 <= (kth[:, None] + _D2_NOISE_BAND)).sum(axis=1).max())
    take = min(max(take, k + 1), d2.shape[1])
    idx = np.argpartition(d2, take - 1, axis=1)[:, :take]
    diff = q64[:, None, :] - sub64[idx]
    dd = np.sqrt((diff * diff).sum(axis=2))
    if self_pos is not None:
        dd[idx == self_pos[:, None]] = np.inf
    cols = np.argsort(dd, axis=1, kind="stable")
    dd = np.take_along_axis(dd, cols, axis=1)
    return dd, np.take_along_axis(idx, cols, axis=1)


def _knn_exact(rows: np.ndarray, k: int, query_ids=None) -> np.ndarray:
    """Mean distance to the k nearest other rows, brute force in chunks."""
    n = rows.shape[0]
    rows64 = rows.astype(np.float64)
    sq = np.einsum("ij,ij->i", rows64, rows64)
    queries = np.arange(n) if query_ids is None else np.asarray(query_ids)
    out = np.empty(len(queries), dtype=np.float32)
    chunk = max(16, int(5e7) // n)
    for start in range(0, len(queries), chunk):
        sel = queries[start : start + chunk]
        d2 = sq[sel, None] - 2.0 * (rows64[sel] @ rows64.T) + sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        dd, _ = _refined_knn(rows64[sel], rows64, d2, k, sel)
        out[start : start + chunk] = dd[:, :k].mean(axis=1).astype(np.float32)
    return out


def _knn_clustered(rows: np.ndarray, k: int, seed: int, n_probe: int) -> np.ndarray:
    """Approximate d_k: dedupe rows (duplicate multiplicities handled
    exactly), then exact search over the n_probe nearest k-means cells
    of each distinct vector's own cell."""
    flat = np.ascontiguousarray(rows).view([("", rows.dtype)] * rows.shape[1]).ravel()
    _, first, inverse, counts = np.unique(
        flat, return_index=True, return_inverse=True, return_counts=True
    )
    uniq = rows[first]
    nu = uniq.shape[0]
    # k minus the free zero-distance neighbors from duplicate copies
    kprime = np.maximum(k - (counts - 1), 0)
    n_clusters = max(2, min(4096, int(np.sqrt(nu))))
    km = MiniBatchKMeans(
        n_clusters=n_clusters, random_state=seed, n_init=3, batch_size=4096
    )
    assign = km.fit_predict(uniq)
    centers = km.cluster_centers_.astype(np.float32)
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(n_clusters + 1))
    csq = np.einsum("ij,ij->i", centers, centers)
    out_u = np.zeros(nu, dtype=np.float32)
    take = 2 * k + 4
    for c in range(n_clusters):
        members = order[bounds[c] : bounds[c + 1]]
        if len(members) == 0:
            continue
        d2c = csq[c] - 2.0 * (centers[c] @ centers.T) + csq
        probe = np.argsort(d2c, kind="stable")
        cand_parts, cand_total = [], 0
        for p in probe:
            cell = order[bounds[p] : bounds[p + 1]]
            cand_parts.append(cell)
            cand_total += len(cell)
            if len(cand_parts) >= n_probe and cand_total > take:
                break
        cand = np.concatenate(cand_parts)
        sub64 = uniq[cand].astype(np.float64)
        sq = np.einsum("ij,ij->i", sub64, sub64)
        pos = {int(g): i for i, g in enumerate(cand)}
        cnt_cand = counts[cand]
        for start in range(0, len(members), 2048):
            sel = members[start : start + 2048]
            self_pos = np.array([pos[int(g)] for g in sel])
            q = sub64[self_pos]
            d2 = sq[self_pos, None] - 2.0 * (q @ sub64.T) + sq[None, :]
            np.maximum(d2, 0.0, out=d2)
            dd, idx = _refined_knn(q, sub64, d2, k, self_pos)
            cnt = cnt_cand[idx]
            cnt[~np.isfinite(dd)] = 0
            need = kprime[sel]
            before = np.concatenate(
                [np.zeros((len(sel), 1), dtype=np.int64), np.cumsum(cnt, axis=1)[:, :-1]],
                axis=1,
            )
            grab = np.clip(need[:, None] - before, 0, cnt)
            dd = np.where(np.isfinite(dd), dd, 0.0)
            out_u[sel] = ((dd * grab).sum(axis=1) / k).astype(np.float32)
    return out_u[inverse]


def knn_mean_distance(
    rows: np.ndarray,
    k: int = DEFAULT_K,
    seed: int = 0,
    exact_threshold: int = EXACT_KNN_THRESHOLD,
    n_probe: int = 8,
    audit_size: int = 10_000,
    audit_rel_tol: float = 0.02,
) -> np.ndarray:
    """Per-row mean L2 distance to the k nearest other rows.

    Small inputs use exact brute force.  Larger inputs use a
    cluster-pruned search whose output is accepted only if an exact
    audit on a seeded row subset agrees within audit_rel_tol mean
    relative error.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    n = rows.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows for k={k}, got {n}")
    if n <= exact_threshold:
        return _knn_exact(rows, k)
    approx = _knn_clustered(rows, k, seed, n_probe)
    audit_ids = _rng(_derive_seed(seed, "knn-audit")).choice(
        n, size=min(audit_size, n), replace=False
    )
    exact = _knn_exact(rows, k, query_ids=audit_ids)
    denom = np.maximum(exact.astype(np.float64), 1e-12)
    rel = np.abs(approx[audit_ids].astype(np.float64) - exact) / denom
    rel[(exact == 0) & (approx[audit_ids] == 0)] = 0.0
    if rel.mean() >= audit_rel_tol:
        raise KnnAuditError(
            f"approximate kNN mean relative error {rel.mean():.4f} "
            f">= {audit_rel_tol} on {len(audit_ids)}-row exact audit"
        )
    return approx


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------


def inverse_density_sample(ids, weights, m: int, seed: int) -> np.ndarray:
    """m distinct ids, drawn without replacement with probability
    proportional to weight (exponential-keys method)."""
    ids = np.asarray(ids)
    weights = np.asarray(weights, dtype=np.float64)
    if m > len(ids):
        raise SplitError(f"cannot sample {m} from {len(ids)} ids")
    if (weights < 0).any():
        raise ValueError("weights must be non-negative")
    if not (weights > 0).any():
        raise ValueError("weights must not all be zero")
    exp = _rng(seed).exponential(1.0, size=len(ids))
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0, exp / weights, np.inf)
    picked = np.argsort(keys, kind="stable")[:m]
    return np.sort(ids[picked])


def diverse_sample(classes: EquivalenceClassing, m: int, seed: int, pool=None) -> np.ndarray:
    """Class-uniform sampling in rounds: each round visits the surviving
    classes in a fresh random order and takes one untaken member
    (uniformly) from each; exhausted classes drop out.  Optionally
    restricted to a pool of eligible ids."""
    if pool is None:
        groups = [classes.members(c).copy() for c in range(classes.n_classes)]
    else:
        pool = np.asarray(pool)
        cls = classes.class_index[pool]
        order = np.argsort(cls, kind="stable")
        bounds = np.flatnonzero(np.diff(cls[order], prepend=-1, append=-1))
        groups = [pool[order[bounds[i] : bounds[i + 1]]].copy() for i in range(len(bounds) - 1)]
    total = sum(len(g) for g in groups)
    if m > total:
        raise SplitError(f"cannot sample {m} from {total} eligible ids")
    rng = _rng(seed)
    taken = np.zeros(len(groups), dtype=np.int64)
    alive = np.array([c for c in range(len(groups)) if len(groups[c])])
    out = np.empty(m, dtype=np.int64)
    i = 0
    while i < m:
        alive = alive[rng.permutation(len(alive))]
        for c in alive[: m - i]:
            g = groups[c]
            # partial Fisher-Yates: uniform over the untaken suffix
            j = int(taken[c] + rng.integers(len(g) - taken[c]))
            g[taken[c]], g[j] = g[j], g[taken[c]]
            out[i] = g[taken[c]]
            taken[c] += 1
            i += 1
        alive = alive[taken[alive] < np.array([len(groups[c]) for c in alive])]
    return np.sort(out)


# ---------------------------------------------------------------------------
# support partitions
# ---------------------------------------------------------------------------


@dataclass
class SupportPartition:
    """Ball of radius r around the median centroid, plus its complement."""

    manifold: str
    centroid: np.ndarray
    radius: float
    s_in: np.ndarray
    s_out: np.ndarray


def geometric_partition(
    rows: np.ndarray,
    inside_fraction: float = DEFAULT_INSIDE_FRACTION,
    manifold: str = "",
    ids=None,
) -> SupportPartition:
    """Split ids by distance to the coordinate-wise median centroid.

    r is the smallest observed distance such that at least
    inside_fraction of the rows lie within it (percentile tie-break).
    """
    rows = np.asarray(rows, dtype=np.float32)
    if rows.shape[0] == 0:
        raise ValueError("empty embedding matrix")
    ids = np.arange(rows.shape[0]) if ids is None else np.asarray(ids)
    sub = rows[ids].astype(np.float64)
    centroid = np.median(sub, axis=0)
    dist = np.sqrt(((sub - centroid) ** 2).sum(axis=1))
    need = int(np.ceil(inside_fraction * len(ids)))
    radius = float(np.sort(dist)[need - 1])
    inside = dist <= radius
    return SupportPartition(
        manifold, centroid.astype(np.float32), radius, ids[inside], ids[~inside]
    )


# ---------------------------------------------------------------------------
# split specs
# ---------------------------------------------------------------------------

SPLIT_NAMES = (
    "diverse",
    "semantic",
    "syntactic",
    "sem-interp",
    "sem-extrap",
    "syn-interp",
    "syn-extrap",
)


@dataclass
class SplitSpec:
    """A named train/test id split plus the parameters that produced it."""

    name: str
    train_ids: np.ndarray
    test_ids: np.ndarray
    seed: int
    pool_seed: int
    universe_hash: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise SplitError(f"unknown split name {self.name!r}")
        overlap = np.intersect1d(self.train_ids, self.test_ids)
        if len(overlap):
            raise SplitError(f"{self.name}: train/test overlap on {len(overlap)} ids")

    def meta(self) -> dict:
        return {
            "name": self.name,
            "train_size": int(len(self.train_ids)),
            "test_size": int(len(self.test_ids)),
            "seed": self.seed,
            "pool_seed": self.pool_seed,
            "universe_hash": self.universe_hash,
            "params": self.params,
        }


def _uniform_pool(n: int, pool_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded global 80/20 id partition shared by all density strategies."""
    perm = _rng(pool_seed).permutation(n)
    cut = (n * 4) // 5
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def build_density_splits(
    u: Universe,
    classes: EquivalenceClassing,
    sem: np.ndarray,
    syn: np.ndarray,
    train_size: int = DEFAULT_TRAIN_SIZE,
    test_size: int = DEFAULT_TEST_SIZE,
    pool_seed: int = 0,
    seed: int = 0,
    k: int = DEFAULT_K,
    knn_exact_threshold: int = EXACT_KNN_THRESHOLD,
) -> dict[str, SplitSpec]:
    """Diverse / semantic / syntactic splits over a shared 80/20 pool."""
    n = len(u)
    if sem.shape[0] != n or syn.shape[0] != n:
        raise SplitError("embedding row counts disagree with the universe")
    train_pool, test_pool = _uniform_pool(n, pool_seed)
    if train_size > len(train_pool) or test_size > len(test_pool):
        raise SplitError(
            f"pool too small: need {train_size}/{test_size}, "
            f"have {len(train_pool)}/{len(test_pool)}"
        )
    uhash = u.content_hash()
    out: dict[str, SplitSpec] = {}

    out["diverse"] = SplitSpec(
        "diverse",
        diverse_sample(classes, train_size, _derive_seed(seed, "diverse-train"), train_pool),
        diverse_sample(classes, test_size, _derive_seed(seed, "diverse-test"), test_pool),
        seed,
        pool_seed,
        uhash,
        {"strategy": "class-uniform"},
    )
    for name, rows in (("semantic", sem), ("syntactic", syn)):
        picks = []
        for pool, size, tag in (
            (train_pool, train_size, "train"),
            (test_pool, test_size, "test"),
        ):
            dk = knn_mean_distance(
                rows[pool], k,
                seed=_derive_seed(seed, f"{name}-knn-{tag}"),
                exact_threshold=knn_exact_threshold,
            )
            picks.append(
                inverse_density_sample(pool, dk, size, _derive_seed(seed, f"{name}-{tag}"))
            )
        out[name] = SplitSpec(
            name, picks[0], picks[1], seed, pool_seed, uhash,
            {"strategy": "inverse-density", "k": k},
        )
    return out


def build_support_splits(
    u: Universe,
    sem: np.ndarray,
    syn: np.ndarray,
    train_size: int = DEFAULT_TRAIN_SIZE,
    test_size: int = DEFAULT_TEST_SIZE,
    seed: int = 0,
    inside_fraction: float = DEFAULT_INSIDE_FRACTION,
    syn_zero_flags=None,
) -> tuple[dict[str, SplitSpec], dict[str, SupportPartition]]:
    """Interpolation/extrapolation splits per manifold.

    Both regimes of a manifold share one train set, drawn uniformly
    from the inside region; the interpolation test set is uniform from
    the remaining inside ids, the extrapolation test set uniform from
    the outside region.  Zero-projection syntactic rows are excluded
    from the radius statistics.
    """
    n = len(u)
    uhash = u.content_hash()
    splits: dict[str, SplitSpec] = {}
    partitions: dict[str, SupportPartition] = {}
    for tag, rows in (("sem", sem), ("syn", syn)):
        ids = None
        if tag == "syn" and syn_zero_flags is not None and syn_zero_flags.any():
            ids = np.flatnonzero(~syn_zero_flags)
            warnings.warn(
                f"excluding {n - len(ids)} zero-projection rows from the "
                f"syntactic partition"
            )
        part = geometric_partition(rows, inside_fraction, tag, ids)
        partitions[tag] = part
        if train_size + test_size > len(part.s_in) or test_size > len(part.s_out):
            raise SplitError(
                f"{tag} regions too small: |S_in|={len(part.s_in)}, "
                f"|S_out|={len(part.s_out)}"
            )
        rng = _rng(_derive_seed(seed, f"{tag}-support"))
        inside = rng.permutation(part.s_in)
        train = np.sort(inside[:train_size])
        interp_test = np.sort(inside[train_size : train_size + test_size])
        extrap_test = np.sort(rng.permutation(part.s_out)[:test_size])
        params = {
            "strategy": "support",
            "inside_fraction": inside_fraction,
            "radius": part.radius,
            "manifold": tag,
        }
        splits[f"{tag}-interp"] = SplitSpec(
            f"{tag}-interp", train, interp_test, seed, 0, uhash, params
        )
        splits[f"{tag}-extrap"] = SplitSpec(
            f"{tag}-extrap", train, extrap_test, seed, 0, uhash, params
        )
    return splits, partitions


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

PMID_MAGIC = b"PMID"
PMID_VERSION = 1


def save_id_list(path, ids: np.ndarray) -> None:
    ids = np.ascontiguousarray(ids, dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(PMID_MAGIC)
        fh.write(struct.pack("<IQ", PMID_VERSION, len(ids)))
        fh.write(ids.tobytes())


def load_id_list(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != PMID_MAGIC:
            raise ValueError("not an id-list file")
        version, count = struct.unpack("<IQ", fh.read(12))
        if version != PMID_VERSION:
            raise ValueError(f"unsupported id-list version {version}")
        return np.frombuffer(fh.read(count * 8), dtype="<u8").astype(np.int64)


def save_split(spec: SplitSpec, out_dir) -> None:
    with open(os.path.join(out_dir, f"{spec.name}.json"), "w") as fh:
        json.dump(spec.meta(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_id_list(os.path.join(out_dir, f"{spec.name}.train.pmid"), spec.train_ids)
    save_id_list(os.path.join(out_dir, f"{spec.name}.test.pmid"), spec.test_ids)


def load_split(out_dir, name: str) -> SplitSpec:
    with open(os.path.join(out_dir, f"{name}.json")) as fh:
        meta = json.load(fh)
    return SplitSpec(
        meta["name"],
        load_id_list(os.path.join(out_dir, f"{name}.train.pmid")),
        load_id_list(os.path.join(out_dir, f"{name}.test.pmid")),
        meta["seed"],
        meta["pool_seed"],
        meta["universe_hash"],
        meta["params"],
    )
