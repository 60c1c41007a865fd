"""Float32 program execution, validity decisions, and equivalence signatures.

All arithmetic follows binary32 semantics: NaN/inf are values, never
errors (log/sqrt of negatives -> NaN, 0/0 -> NaN, c/0 -> +-inf, overflow
-> inf).  Validity sampling uses a counter-based generator (Philox)
keyed by the global seed and a digest of the program source, so
decisions are independent of enumeration order and scheduling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grammar import Node, render, to_postfix

# The signature grid must contain the semantic-embedding grid so that equal
# signatures imply identical semantic embeddings: 1021 = 4 * 255 + 1 refines
# the default 256-point embedding grid exactly, and keeps the audited
# signature-collision rate below the 0.1% build gate.
DEFAULT_SIGNATURE_GRID_SIZE = 1021
DEFAULT_SEMANTIC_GRID_SIZE = 256
AUDIT_GRID_SIZE = 1024

# Cumulative attempt checkpoints for the chunked validity scan.  The scan
# accepts as soon as enough distinct valid pairs exist, and (unless exact)
# abandons programs whose projected valid yield is hopeless: at checkpoint m
# with v valid so far, reject when v * 4 * budget < required * m.  For any
# program the full-budget scan would accept, the probability of tripping this
# is negligible (the projection sits at a quarter of the required rate).
_CHECKPOINTS = (1152, 4096, 16384, 65536, 262144)
_REJECT_FROM = 16384


@dataclass(frozen=True)
class EvalDomain:
    """Closed evaluation interval plus the validity sampling budget."""

    lo: float = -10.0
    hi: float = 10.0
    budget: int = 1_000_000
    required_pairs: int = 1_000

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("domain requires lo < hi")
        if not self.budget >= self.required_pairs >= 1:
            raise ValueError("domain requires budget >= required_pairs >= 1")

    def to_json(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "budget": self.budget,
            "required_pairs": self.required_pairs,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalDomain":
        return cls(d["lo"], d["hi"], d["budget"], d["required_pairs"])


def make_grid(size: int, lo: float = -10.0, hi: float = 10.0) -> np.ndarray:
    """Equidistant float32 grid, endpoints inclusive."""
    if size < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(lo, hi, size).astype(np.float32)


def eval_grid(ast: Node, xs) -> np.ndarray:
    """Elementwise float32 evaluation of one program."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float32))
    codes = to_postfix(ast)[None, :]
    lengths = np.array([codes.shape[1]], dtype=np.int32)
    return kernels.eval_grid_batch(codes, lengths, xs)[0]


def eval_scalar(ast: Node, x) -> np.float32:
    return eval_grid(ast, [x])[0]


_CANONICAL_NAN = np.float32(np.nan)


def canonicalize_outputs(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaNs by the canonical quiet NaN; return (values, valid mask).

    Makes digests independent of NaN payload bits while keeping +-inf
    distinguishable.
    """
    values = np.asarray(values, dtype=np.float32)
    mask = np.isfinite(values)
    values = np.where(np.isnan(values), _CANONICAL_NAN, values)
    return values, mask


@dataclass(frozen=True)
class Signature:
    """Output fingerprint on a fixed grid: values, validity mask, digest.

    Digest equality is exactly bit-equality of (canonicalized values, mask).
    """

    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    digest: bytes

    def __eq__(self, other):
        return isinstance(other, Signature) and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)


def _digest_row(values: np.ndarray, mask: np.ndarray) -> bytes:
    return hashlib.blake2b(
        values.tobytes() + np.packbits(mask).tobytes(), digest_size=16
    ).digest()


def signature(ast: Node, sig_grid: np.ndarray) -> Signature:
    values, mask = canonicalize_outputs(eval_grid(ast, sig_grid))
    return Signature(values, mask, _digest_row(values, mask))


def signature_digests(raw_values: np.ndarray) -> np.ndarray:
    """Digests for a batch of raw grid outputs -> (N, 16) uint8."""
    values, mask = canonicalize_outputs(raw_values)
    out = np.empty((values.shape[0], 16), dtype=np.uint8)
    for i in range(values.shape[0]):
        out[i] = np.frombuffer(_digest_row(values[i], mask[i]), dtype=np.uint8)
    return out


# ---------------------------------------------------------------------------
# seeded attempt streams and validity
# ---------------------------------------------------------------------------


def _source_key(source: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(source.encode(), digest_size=8).digest(), "little"
    )


def attempt_generator(seed: int, source: str) -> np.random.Generator:
    """Counter-based per-program input stream, keyed by (seed, source)."""
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64(_source_key(source))])
    return np.random.Generator(np.random.Philox(key=key))


def _draw_attempts(gen: np.random.Generator, n: int, dom: EvalDomain) -> np.ndarray:
    u = gen.random(n, dtype=np.float32)
    lo = np.float32(dom.lo)
    span = np.float32(dom.hi) - lo
    return lo + u * span


def _chunk_schedule(budget: int) -> list[int]:
    marks = [c for c in _CHECKPOINTS if c < budget]
    return marks + [budget]


class _ScanState:
    """Per-program bookkeeping for the chunked validity/spec scan."""

    __slots__ = ("gen", "attempts", "valid_x", "valid_y", "done", "accepted")

    def __init__(self, gen):
        self.gen = gen
        self.attempts = 0
        self.valid_x: list[np.ndarray] = []
        self.valid_y: list[np.ndarray] = []
        self.done = False
        self.accepted = False

    def valid_count(self) -> int:
        return sum(len(a) for a in self.valid_x)

    def distinct_count(self) -> int:
        if not self.valid_x:
            return 0
        return len(np.unique(np.concatenate(self.valid_x)))


def _scan_batch(codes, lengths, sources, dom: EvalDomain, seed: int, exact: bool):
    """Run the chunk schedule over a batch; returns the per-program states."""
    states = [_ScanState(attempt_generator(seed, s)) for s in sources]
    need = dom.required_pairs
    prev = 0
    for mark in _chunk_schedule(dom.budget):
        chunk = mark - prev
        prev = mark
        live = [i for i, st in enumerate(states) if not st.done]
        if not live:
            break
        xs = np.empty((len(live), chunk), dtype=np.float32)
        for r, i in enumerate(live):
            xs[r] = _draw_attempts(states[i].gen, chunk, dom)
        ys = kernels.eval_rows_batch(codes[live], lengths[live], xs)
        finite = np.isfinite(ys)
        for r, i in enumerate(live):
            st = states[i]
            st.attempts = mark
            if finite[r].any():
                st.valid_x.append(xs[r][finite[r]])
                st.valid_y.append(ys[r][finite[r]])
            v = st.valid_count()
            if v >= need and st.distinct_count() >= need:
                st.done = True
                st.accepted = True
            elif mark >= dom.budget:
                st.done = True
            elif not exact and mark >= _REJECT_FROM and v * 4 * dom.budget < need * mark:
                st.done = True
    return states


def validity_mask(
    codes, lengths, sources, dom: EvalDomain, seed: int, exact: bool = False,
    batch_size: int = 4096, progress=None,
) -> np.ndarray:
    """Vector of is_valid_program decisions for a program table."""
    codes = np.asarray(codes)
    lengths = np.asarray(lengths)
    n = len(lengths)
    out = np.zeros(n, dtype=bool)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batch_sources = [
            s.decode() if isinstance(s, bytes) else str(s) for s in sources[start:stop]
        ]
        states = _scan_batch(
            codes[start:stop], lengths[start:stop], batch_sources, dom, seed, exact
        )
        out[start:stop] = [st.accepted for st in states]
        if progress is not None:
            progress(stop, n)
    return out


def is_valid_program(ast: Node, dom: EvalDomain, seed: int, exact: bool = False) -> bool:
    """True iff the seeded uniform stream yields the required number of
    distinct valid (x, y) pairs within the attempt budget."""
    codes = to_postfix(ast)[None, :]
    lengths = np.array([codes.shape[1]], dtype=np.int32)
    return bool(validity_mask(codes, lengths, [render(ast)], dom, seed, exact)[0])


def collect_spec_pairs(ast: Node, dom: EvalDomain, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """First required_pairs accepted (finite y, distinct x) pairs, in draw order.

    Uses the same stream as is_valid_program, so validity and spec
    generation cannot disagree.  Raises if the budget is exhausted.
    """
    source = render(ast)
    gen = attempt_generator(seed, source)
    codes = to_postfix(ast)[None, :]
    lengths = np.array([codes.shape[1]], dtype=np.int32)
    need = dom.required_pairs
    xs_out = np.empty(need, dtype=np.float32)
    ys_out = np.empty(need, dtype=np.float32)
    seen: set[float] = set()
    count = 0
    prev = 0
    for mark in _chunk_schedule(dom.budget):
        chunk = mark - prev
        prev = mark
        xs = _draw_attempts(gen, chunk, dom)
        ys = kernels.eval_rows_batch(codes, lengths, xs[None, :])[0]
        finite = np.isfinite(ys)
        for j in np.flatnonzero(finite):
            x = float(xs[j])
            if x in seen:
                continue
            seen.add(x)
            xs_out[count] = xs[j]
            ys_out[count] = ys[j]
            count += 1
            if count == need:
                return xs_out, ys_out
    raise RuntimeError(
        f"budget exhausted collecting spec pairs for {source!r}: "
        f"{count}/{need} pairs after {dom.budget} attempts"
    )
