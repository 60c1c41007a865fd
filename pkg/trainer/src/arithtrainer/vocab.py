"""Character vocabulary for program text.

The alphabet is fixed by the benchmark grammar: the variable, operator
names and symbols, and parentheses.  Three specials frame sequences:
PAD (0) for batching, BOS (1) starts decoding, EOS (2) ends it.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_ALPHABET = "x()+-*/sincoeplgqrt"

PAD, BOS, EOS = 0, 1, 2
N_SPECIALS = 3


@dataclass(frozen=True)
class Vocab:
    alphabet: str

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet contains duplicate characters")

    @property
    def size(self) -> int:
        return len(self.alphabet) + N_SPECIALS

    def encode(self, text: str) -> list[int]:
        try:
            return [self.alphabet.index(ch) + N_SPECIALS for ch in text]
        except ValueError:
            bad = next(ch for ch in text if ch not in self.alphabet)
            raise ValueError(f"character {bad!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= N_SPECIALS:
                out.append(self.alphabet[i - N_SPECIALS])
        return "".join(out)

    @classmethod
    def from_sources(cls, sources) -> "Vocab":
        """Alphabet observed in a corpus of program strings, in first-seen
        order so the mapping is deterministic for a fixed corpus order."""
        seen: dict[str, None] = {}
        for src in sources:
            for ch in src:
                seen.setdefault(ch, None)
        if not seen:
            raise ValueError("no sources to build a vocabulary from")
        return cls("".join(seen))

    @classmethod
    def default(cls) -> "Vocab":
        return cls(DEFAULT_ALPHABET)
