"""Whitespace vocabulary: id <-> surface mapping for token sequences.

Token sequences are plain tuples of ints. ``x + delta`` is the append
operator used everywhere a suffix is attached to a query.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

UNK = "<unk>"
PAD = "<pad>"

TokenSeq = tuple  # tuple[int, ...]


class Vocabulary:
    """Bijection between token ids and surface strings.

    Ids 0 and 1 are always ``<unk>`` and ``<pad>``; any surface that is not
    in the vocabulary encodes to the unknown id.
    """

    def __init__(self, surfaces: Iterable[str]):
        items = [UNK, PAD]
        for s in surfaces:
            if s in (UNK, PAD):
                continue
            items.append(s)
        bad = [s for s in items if not s or any(ch.isspace() for ch in s)]
        if bad:
            raise ConfigError("invalid vocabulary surfaces", [repr(s) for s in bad[:10]])
        if len(set(items)) != len(items):
            seen, dups = set(), []
            for s in items:
                if s in seen:
                    dups.append(s)
                seen.add(s)
            raise ConfigError("duplicate vocabulary surfaces", dups[:10])
        self.surfaces = tuple(items)
        self._index = {s: i for i, s in enumerate(self.surfaces)}

    unk_id = 0
    pad_id = 1

    def __len__(self):
        return len(self.surfaces)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.surfaces == other.surfaces

    def __hash__(self):
        return hash(self.surfaces)

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    def id_of(self, surface: str) -> int:
        return self._index.get(surface, self.unk_id)

    def surface_of(self, token: int) -> str:
        return self.surfaces[token]

    def encode(self, text: str) -> TokenSeq:
        return tuple(self._index.get(w, self.unk_id) for w in text.split())

    def decode(self, tokens: Sequence[int]) -> str:
        return " ".join(self.surfaces[t] for t in tokens)

    def validate(self, tokens: Sequence[int], max_length: int | None = None) -> None:
        n = len(self)
        bad = [t for t in tokens if not (isinstance(t, int) and 0 <= t < n)]
        if bad:
            raise ConfigError(f"token ids outside vocabulary of size {n}", [str(t) for t in bad[:10]])
        if max_length is not None and len(tokens) > max_length:
            raise ConfigError(f"sequence length {len(tokens)} exceeds max_sequence_length {max_length}")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        """One surface per line; the line number is the id."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [UNK, PAD]:
            raise ConfigError(f"{path}: first two lines must be {UNK} and {PAD}")
        return cls(lines)

    def dump(self, path) -> None:
        Path(path).write_text("\n".join(self.surfaces) + "\n", encoding="utf-8")


def encode(vocab: Vocabulary, text: str) -> TokenSeq:
    return vocab.encode(text)


def decode(vocab: Vocabulary, tokens: Sequence[int]) -> str:
    return vocab.decode(tokens)
