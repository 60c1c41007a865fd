"""Deduplicated program universe and its observational-equivalence partition.

The universe holds every structurally distinct, validity-filtered program
up to the operator bound, with dense ids assigned in enumeration order
(operator count, then canonical string).  Persisted as a little-endian
binary table (magic "PMUN") with fixed-size records pointing into a
string pool, so large universes stay memory-mappable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .evaluator import (
    AUDIT_GRID_SIZE,
    DEFAULT_SIGNATURE_GRID_SIZE,
    EvalDomain,
    canonicalize_outputs,
    make_grid,
    signature_digests,
    validity_mask,
)
from .grammar import (
    Node,
    build_level_tables,
    count_trees,
    from_postfix,
    grammar_hash,
    token_width,
)

PMUN_MAGIC = b"PMUN"
PMUN_VERSION = 1
_RECORD_DTYPE = np.dtype(
    [("id", "<u8"), ("op_count", "u1"), ("digest", "(16,)u1"), ("src_off", "<u8"), ("src_len", "<u2")]
)

_EVAL_CHUNK = 65_536


class UniverseBuildError(RuntimeError):
    pass


@dataclass
class Universe:
    """Ordered table of valid programs; ids are dense 0..N-1."""

    max_ops: int
    domain: EvalDomain
    seed: int
    sig_grid_size: int
    sources: np.ndarray  # (N,) bytes
    codes: np.ndarray  # (N, token_width) uint8
    lengths: np.ndarray  # (N,) int32
    op_counts: np.ndarray  # (N,) uint8
    digests: np.ndarray  # (N, 16) uint8, signature digests
    raw_counts: list[int] = field(default_factory=list)  # per op count, pre-filter
    valid_counts: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lengths)

    def source(self, i: int) -> str:
        return self.sources[i].decode()

    def ast(self, i: int) -> Node:
        return from_postfix(self.codes[i, : self.lengths[i]])

    def sig_grid(self) -> np.ndarray:
        return make_grid(self.sig_grid_size, self.domain.lo, self.domain.hi)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta(), sort_keys=True).encode())
        h.update(self.sources.tobytes())
        h.update(self.digests.tobytes())
        return h.hexdigest()[:32]

    def meta(self) -> dict:
        return {
            "grammar_hash": grammar_hash(),
            "max_ops": self.max_ops,
            "domain": self.domain.to_json(),
            "seed": self.seed,
            "sig_grid_size": self.sig_grid_size,
            "raw_counts": list(self.raw_counts),
            "valid_counts": list(self.valid_counts),
            "size": len(self),
            "backend": kernels.BACKEND,
        }

    # -- binary persistence -------------------------------------------------

    def save(self, path) -> None:
        records = np.zeros(len(self), dtype=_RECORD_DTYPE)
        records["id"] = np.arange(len(self), dtype=np.uint64)
        records["op_count"] = self.op_counts
        records["digest"] = self.digests
        src_lens = np.char.str_len(self.sources).astype(np.uint64)
        offsets = np.zeros(len(self), dtype=np.uint64)
        np.cumsum(src_lens[:-1], out=offsets[1:]) if len(self) > 1 else None
        records["src_off"] = offsets
        records["src_len"] = src_lens
        meta_blob = json.dumps(
            {
                "max_ops": self.max_ops,
                "domain": self.domain.to_json(),
                "seed": self.seed,
                "sig_grid_size": self.sig_grid_size,
                "raw_counts": list(self.raw_counts),
                "valid_counts": list(self.valid_counts),
            }
        ).encode()
        with open(path, "wb") as fh:
            fh.write(PMUN_MAGIC)
            fh.write(struct.pack("<IQ", PMUN_VERSION, len(self)))
            fh.write(struct.pack("<I", len(meta_blob)))
            fh.write(meta_blob)
            fh.write(records.tobytes())
            pool = b"".join(s for s in self.sources.tolist())
            fh.write(pool)

    @classmethod
    def load(cls, path) -> "Universe":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != PMUN_MAGIC:
                raise ValueError(f"not a universe file (magic {magic!r})")
            version, count = struct.unpack("<IQ", fh.read(12))
            if version != PMUN_VERSION:
                raise ValueError(f"unsupported universe version {version}")
            (meta_len,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(meta_len))
            records = np.frombuffer(fh.read(count * _RECORD_DTYPE.itemsize), dtype=_RECORD_DTYPE)
            pool = fh.read()
        if not np.array_equal(records["id"], np.arange(count, dtype=np.uint64)):
            raise ValueError("universe ids are not dense")
        max_len = int(records["src_len"].max()) if count else 1
        sources = np.empty(count, dtype=f"S{max_len}")
        for i in range(count):
            off, ln = int(records["src_off"][i]), int(records["src_len"][i])
            sources[i] = pool[off : off + ln]
        codes, lengths = kernels.parse_sources_batch(sources, token_width(meta["max_ops"]))
        return cls(
            max_ops=meta["max_ops"],
            domain=EvalDomain.from_json(meta["domain"]),
            seed=meta["seed"],
            sig_grid_size=meta["sig_grid_size"],
            sources=sources,
            codes=codes,
            lengths=lengths,
            op_counts=records["op_count"].copy(),
            digests=records["digest"].copy(),
            raw_counts=meta["raw_counts"],
            valid_counts=meta["valid_counts"],
        )


def _batch_digests(codes, lengths, grid) -> np.ndarray:
    out = np.empty((len(lengths), 16), dtype=np.uint8)
    for start in range(0, len(lengths), _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, len(lengths))
        raw = kernels.eval_grid_batch(codes[start:stop], lengths[start:stop], grid)
        out[start:stop] = signature_digests(raw)
    return out


def build_universe(
    max_ops: int,
    dom: EvalDomain | None = None,
    seed: int = 0,
    sig_grid_size: int = DEFAULT_SIGNATURE_GRID_SIZE,
    exact_validity: bool = False,
    progress=None,
) -> Universe:
    """Enumerate, validity-filter, and fingerprint all programs up to max_ops.

    Raw per-level counts are cross-checked against the counting recurrence;
    any mismatch aborts the build.
    """
    dom = dom or EvalDomain()
    grid = make_grid(sig_grid_size, dom.lo, dom.hi)
    levels = build_level_tables(max_ops)
    raw_counts, valid_counts = [], []
    kept_sources, kept_codes, kept_lengths, kept_ops, kept_digests = [], [], [], [], []
    width = token_width(max_ops)
    for level in levels:
        if len(level) != count_trees(level.n_ops):
            raise UniverseBuildError(
                f"enumeration count mismatch at {level.n_ops} ops: "
                f"{len(level)} != {count_trees(level.n_ops)}"
            )
        raw_counts.append(len(level))
        if progress is not None:
            progress(f"validity scan: level {level.n_ops} ({len(level)} programs)")
        mask = validity_mask(
            level.codes, level.lengths, level.sources, dom, seed, exact=exact_validity
        )
        valid_counts.append(int(mask.sum()))
        codes = np.full((int(mask.sum()), width), kernels.CODE_PAD, dtype=np.uint8)
        codes[:, : level.codes.shape[1]] = level.codes[mask]
        kept_codes.append(codes)
        kept_lengths.append(level.lengths[mask])
        kept_ops.append(np.full(int(mask.sum()), level.n_ops, dtype=np.uint8))
        kept_sources.append(level.sources[mask])
        if progress is not None:
            progress(f"signatures: level {level.n_ops} ({int(mask.sum())} valid)")
        kept_digests.append(_batch_digests(codes, level.lengths[mask], grid))
    max_src = max(s.dtype.itemsize for s in kept_sources)
    return Universe(
        max_ops=max_ops,
        domain=dom,
        seed=seed,
        sig_grid_size=sig_grid_size,
        sources=np.concatenate([s.astype(f"S{max_src}") for s in kept_sources]),
        codes=np.concatenate(kept_codes),
        lengths=np.concatenate(kept_lengths),
        op_counts=np.concatenate(kept_ops),
        digests=np.concatenate(kept_digests),
        raw_counts=raw_counts,
        valid_counts=valid_counts,
    )


@dataclass
class EquivalenceClassing:
    """Partition of universe ids by signature digest.

    member_ids holds all ids grouped by class; class c owns
    member_ids[class_offsets[c]:class_offsets[c+1]], sorted ascending.
    """

    class_digests: np.ndarray  # (K, 16) uint8
    class_offsets: np.ndarray  # (K+1,) int64
    member_ids: np.ndarray  # (N,) int64
    representatives: np.ndarray  # (K,) int64
    class_index: np.ndarray  # (N,) int64: id -> class

    @property
    def n_classes(self) -> int:
        return len(self.representatives)

    def members(self, c: int) -> np.ndarray:
        return self.member_ids[self.class_offsets[c] : self.class_offsets[c + 1]]


def partition_equivalence(u: Universe) -> EquivalenceClassing:
    """Group ids by signature digest; pick lexicographically smallest
    canonical source as each class's representative."""
    voids = np.ascontiguousarray(u.digests).view("V16").ravel()
    # Group members by digest with ids ascending inside each class.
    order = np.argsort(voids, kind="stable")
    sorted_voids = voids[order]
    boundaries = np.flatnonzero(
        np.concatenate(([True], sorted_voids[1:] != sorted_voids[:-1]))
    )
    offsets = np.concatenate((boundaries, [len(voids)])).astype(np.int64)
    class_digests = u.digests[order[boundaries]]
    class_index = np.empty(len(u), dtype=np.int64)
    class_ids = np.repeat(np.arange(len(boundaries)), np.diff(offsets))
    class_index[order] = class_ids
    # Representative: min canonical source per class.
    rep_order = np.lexsort((u.sources, voids))
    rep_class = class_index[rep_order]
    first_of_class = np.full(len(boundaries), -1, dtype=np.int64)
    seen = np.zeros(len(boundaries), dtype=bool)
    # lexsort output is grouped by digest; first row of each group wins.
    firsts = np.flatnonzero(np.concatenate(([True], rep_class[1:] != rep_class[:-1])))
    first_of_class[rep_class[firsts]] = rep_order[firsts]
    del seen
    return EquivalenceClassing(
        class_digests=class_digests,
        class_offsets=offsets,
        member_ids=order.astype(np.int64),
        representatives=first_of_class,
        class_index=class_index,
    )


def canonical_representative(u: Universe, ids) -> int:
    """Member with the lexicographically smallest canonical source."""
    ids = np.asarray(ids)
    if len(ids) == 0:
        raise ValueError("empty equivalence class")
    return int(ids[np.argmin(u.sources[ids])])


def audit_equivalence(
    u: Universe,
    classing: EquivalenceClassing,
    seed: int = 0,
    grid_size: int = AUDIT_GRID_SIZE,
    max_classes: int = 10_000,
) -> float:
    """Re-verify sampled multi-member classes on a denser grid.

    Returns the fraction of audited classes whose members disagree with
    their representative anywhere on the audit grid (a signature-grid
    collision).  Callers should reject builds with a rate >= 0.1%.
    """
    sizes = np.diff(classing.class_offsets)
    multi = np.flatnonzero(sizes > 1)
    if len(multi) == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    if len(multi) > max_classes:
        multi = rng.choice(multi, size=max_classes, replace=False)
    grid = make_grid(grid_size, u.domain.lo, u.domain.hi)
    violations = 0
    for c in multi:
        ids = classing.members(int(c))
        raw = kernels.eval_grid_batch(u.codes[ids], u.lengths[ids], grid)
        values, mask = canonicalize_outputs(raw)
        same = np.all(
            (values == values[0]) | (~mask & ~mask[0] & np.isnan(values) & np.isnan(values[0])),
            axis=1,
        ) & np.all(mask == mask[0], axis=1)
        if not same.all():
            violations += 1
    return violations / len(multi)
