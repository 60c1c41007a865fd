"""Arithmetic DSL over a single variable x: AST, canonical text, enumeration.

The language has one terminal (``x``), five unary functions
(sin, cos, exp, log, sqrt) and four binary operators (+, -, *, /).
Programs are capped by their operator-node count.  The canonical text
form is fully parenthesized infix with function-call unary application,
e.g. ``sin((x+x))``; it is injective over ASTs, so sorting canonical
strings gives a stable total order on programs.

Programs are also represented as postfix opcode rows (one byte per
node) which is what the evaluation kernels consume.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

# Postfix opcodes.  0 is the variable leaf, 1..5 unary, 6..9 binary.
OP_VAR = 0
UNARY_NAMES = ("sin", "cos", "exp", "log", "sqrt")
BINARY_SYMBOLS = ("+", "-", "*", "/")
UNARY_CODES = {name: i + 1 for i, name in enumerate(UNARY_NAMES)}
BINARY_CODES = {sym: i + 6 for i, sym in enumerate(BINARY_SYMBOLS)}
N_UNARY = len(UNARY_NAMES)
N_BINARY = len(BINARY_SYMBOLS)

# Padding byte for fixed-width postfix rows; never a valid opcode.
CODE_PAD = 255

GRAMMAR_SPEC = """\
arithbench grammar v1
start      : expr
expr       : 'x' | unary '(' expr ')' | '(' expr binop expr ')'
unary      : 'sin' | 'cos' | 'exp' | 'log' | 'sqrt'
binop      : '+' | '-' | '*' | '/'
terminals  : the single input variable x; no numeric constants
bound      : at most L operator nodes (unary + binary) per program
text form  : canonical fully parenthesized infix, ASCII, no whitespace
order      : programs sorted by operator count, then by canonical string
"""


def grammar_hash() -> str:
    """Stable identifier of the grammar definition, embedded in manifests."""
    return hashlib.sha256(GRAMMAR_SPEC.encode()).hexdigest()[:16]


class ParseError(ValueError):
    """Raised on malformed source text; carries the failing position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Node:
    """Immutable AST node.  code 0 = Var, 1..5 = unary fn, 6..9 = binary op."""

    code: int
    children: tuple["Node", ...] = ()

    def __post_init__(self):
        arity = node_arity(self.code)
        if len(self.children) != arity:
            raise ValueError(
                f"opcode {self.code} takes {arity} children, got {len(self.children)}"
            )


def node_arity(code: int) -> int:
    if code == OP_VAR:
        return 0
    if 1 <= code <= 5:
        return 1
    if 6 <= code <= 9:
        return 2
    raise ValueError(f"invalid opcode {code}")


def var() -> Node:
    return Node(OP_VAR)


def unary(name: str, child: Node) -> Node:
    return Node(UNARY_CODES[name], (child,))


def binary(sym: str, left: Node, right: Node) -> Node:
    return Node(BINARY_CODES[sym], (left, right))


def operator_count(ast: Node) -> int:
    """Number of unary + binary nodes."""
    n = 0 if ast.code == OP_VAR else 1
    for child in ast.children:
        n += operator_count(child)
    return n


def render(ast: Node) -> str:
    """Canonical source text; injective over ASTs."""
    if ast.code == OP_VAR:
        return "x"
    if 1 <= ast.code <= 5:
        return f"{UNARY_NAMES[ast.code - 1]}({render(ast.children[0])})"
    sym = BINARY_SYMBOLS[ast.code - 6]
    return f"({render(ast.children[0])}{sym}{render(ast.children[1])})"


def parse(source: str) -> Node:
    """Parse canonical (whitespace-tolerant) source text into an AST."""
    pos = 0
    n = len(source)

    def skip_ws():
        nonlocal pos
        while pos < n and source[pos].isspace():
            pos += 1

    def expr() -> Node:
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise ParseError("unexpected end of input", pos)
        ch = source[pos]
        if ch == "x":
            pos += 1
            return var()
        if ch == "(":
            pos += 1
            left = expr()
            skip_ws()
            if pos >= n or source[pos] not in BINARY_CODES:
                raise ParseError("expected binary operator", pos)
            sym = source[pos]
            pos += 1
            right = expr()
            skip_ws()
            if pos >= n or source[pos] != ")":
                raise ParseError("expected ')'", pos)
            pos += 1
            return binary(sym, left, right)
        for name in UNARY_NAMES:
            if source.startswith(name, pos):
                pos += len(name)
                skip_ws()
                if pos >= n or source[pos] != "(":
                    raise ParseError(f"expected '(' after '{name}'", pos)
                pos += 1
                child = expr()
                skip_ws()
                if pos >= n or source[pos] != ")":
                    raise ParseError("expected ')'", pos)
                pos += 1
                return Node(UNARY_CODES[name], (child,))
        raise ParseError(f"unexpected character {ch!r}", pos)

    node = expr()
    skip_ws()
    if pos != n:
        raise ParseError("trailing input after expression", pos)
    return node


def to_postfix(ast: Node) -> np.ndarray:
    """Postfix opcode row (uint8), children before parents."""
    out: list[int] = []

    def walk(node: Node):
        for child in node.children:
            walk(child)
        out.append(node.code)

    walk(ast)
    return np.asarray(out, dtype=np.uint8)


def from_postfix(codes) -> Node:
    stack: list[Node] = []
    for code in codes:
        code = int(code)
        if code == CODE_PAD:
            break
        arity = node_arity(code)
        if arity > len(stack):
            raise ValueError("dangling operator in postfix code")
        if arity == 0:
            stack.append(var())
        elif arity == 1:
            stack.append(Node(code, (stack.pop(),)))
        else:
            right = stack.pop()
            left = stack.pop()
            stack.append(Node(code, (left, right)))
    if len(stack) != 1:
        raise ValueError("postfix code does not form a single expression")
    return stack[0]


@lru_cache(maxsize=None)
def count_trees(n_ops: int) -> int:
    """Number of distinct ASTs with exactly n_ops operator nodes.

    t(0) = 1, t(n) = 5 t(n-1) + 4 sum_{i+j=n-1} t(i) t(j).
    """
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    if n_ops == 0:
        return 1
    total = N_UNARY * count_trees(n_ops - 1)
    for i in range(n_ops):
        total += N_BINARY * count_trees(i) * count_trees(n_ops - 1 - i)
    return total


def count_programs_upto(max_ops: int) -> int:
    return sum(count_trees(n) for n in range(max_ops + 1))


def token_width(n_ops: int) -> int:
    """Max postfix length for n_ops operators (all-binary tree: 2n+1)."""
    return 2 * n_ops + 1


def source_width(n_ops: int) -> int:
    """Max canonical-string length for n_ops operators (sqrt chain: 6n+1)."""
    return 6 * n_ops + 1


@dataclass
class LevelTable:
    """All programs with one exact operator count, sorted by canonical string.

    codes is a fixed-width postfix matrix padded with CODE_PAD; sources is a
    numpy bytes array of canonical strings aligned row-for-row with codes.
    """

    n_ops: int
    codes: np.ndarray  # (N, token_width) uint8
    lengths: np.ndarray  # (N,) int32, postfix token counts
    sources: np.ndarray  # (N,) bytes (S dtype)

    def __len__(self) -> int:
        return len(self.lengths)


def _sorted_level(n_ops, codes, lengths, sources) -> LevelTable:
    order = np.argsort(sources, kind="stable")
    return LevelTable(n_ops, codes[order], lengths[order], sources[order])


def build_level_tables(max_ops: int) -> list[LevelTable]:
    """Materialize every program level up to max_ops.

    Vectorized bottom-up assembly: level n is built from the padded code
    matrices and source arrays of earlier levels, then sorted.  Each level's
    row count is cross-checked against the counting recurrence and the build
    aborts on any mismatch.
    """
    if max_ops < 0:
        raise ValueError("max_ops must be >= 0")
    levels: list[LevelTable] = [
        LevelTable(
            0,
            np.array([[OP_VAR]], dtype=np.uint8),
            np.array([1], dtype=np.int32),
            np.array([b"x"], dtype="S1"),
        )
    ]
    for n in range(1, max_ops + 1):
        total = count_trees(n)
        width = token_width(n)
        swidth = source_width(n)
        codes = np.full((total, width), CODE_PAD, dtype=np.uint8)
        lengths = np.empty(total, dtype=np.int32)
        sources = np.empty(total, dtype=f"S{swidth}")
        row = 0

        child = levels[n - 1]
        nc = len(child)
        for name in UNARY_NAMES:
            block = slice(row, row + nc)
            codes[block, : child.codes.shape[1]] = child.codes
            codes[np.arange(row, row + nc), child.lengths] = UNARY_CODES[name]
            lengths[block] = child.lengths + 1
            sources[block] = np.char.add(
                np.char.add(f"{name}(".encode(), child.sources), b")"
            )
            row += nc

        for i in range(n):
            left, right = levels[i], levels[n - 1 - i]
            nl, nr = len(left), len(right)
            lw, rw = left.codes.shape[1], right.codes.shape[1]
            # Cartesian product: every left row repeated, right rows tiled.
            l_codes = np.repeat(left.codes, nr, axis=0)
            l_len = np.repeat(left.lengths, nr)
            l_src = np.repeat(left.sources, nr)
            r_codes = np.tile(right.codes, (nl, 1))
            r_len = np.tile(right.lengths, nl)
            r_src = np.tile(right.sources, nl)
            pair_src = np.char.add(b"(", l_src)
            for sym in BINARY_SYMBOLS:
                block = slice(row, row + nl * nr)
                rows = np.arange(row, row + nl * nr)
                # Fixed-width copy grouped by left length so slices vectorize.
                for ll in np.unique(l_len):
                    sel = l_len == ll
                    codes[rows[sel], :ll] = l_codes[sel, :ll]
                    codes[rows[sel], ll : ll + rw] = r_codes[sel]
                codes[rows, l_len + r_len] = BINARY_CODES[sym]
                lengths[block] = l_len + r_len + 1
                sources[block] = np.char.add(
                    np.char.add(np.char.add(pair_src, sym.encode()), r_src), b")"
                )
                row += nl * nr

        if row != total:
            raise RuntimeError(
                f"enumeration bug: built {row} programs at level {n}, "
                f"recurrence says {total}"
            )
        levels.append(_sorted_level(n, codes, lengths, sources))
    return levels[: max_ops + 1]


@dataclass
class ProgramTable:
    """All programs with operator count <= max_ops in enumeration order."""

    max_ops: int
    codes: np.ndarray  # (N, token_width(max_ops)) uint8, CODE_PAD padded
    lengths: np.ndarray  # (N,) int32
    op_counts: np.ndarray  # (N,) uint8
    sources: np.ndarray  # (N,) bytes

    def __len__(self) -> int:
        return len(self.lengths)

    def source(self, i: int) -> str:
        return self.sources[i].decode()

    def ast(self, i: int) -> Node:
        return from_postfix(self.codes[i, : self.lengths[i]])


def build_program_table(max_ops: int) -> ProgramTable:
    levels = build_level_tables(max_ops)
    total = count_programs_upto(max_ops)
    width = token_width(max_ops)
    codes = np.full((total, width), CODE_PAD, dtype=np.uint8)
    lengths = np.empty(total, dtype=np.int32)
    op_counts = np.empty(total, dtype=np.uint8)
    sources = np.empty(total, dtype=f"S{source_width(max_ops)}")
    row = 0
    for level in levels:
        block = slice(row, row + len(level))
        codes[block, : level.codes.shape[1]] = level.codes
        lengths[block] = level.lengths
        op_counts[block] = level.n_ops
        sources[block] = level.sources
        row += len(level)
    return ProgramTable(max_ops, codes, lengths, op_counts, sources)


def enumerate_programs(max_ops: int) -> Iterator[Node]:
    """Yield every distinct AST with operator count <= max_ops exactly once,
    ordered by operator count then canonical string."""
    for level in build_level_tables(max_ops):
        for i in range(len(level)):
            yield from_postfix(level.codes[i, : level.lengths[i]])
