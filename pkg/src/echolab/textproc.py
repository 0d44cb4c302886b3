"""Deterministic tokenizer, lexical attributes and attribute hashing."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ATTRS = ("NORM", "PREFIX", "SUFFIX", "SHAPE")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def shape_of(text: str) -> str:
    """Map characters to X/x/d classes, keeping runs of at most four."""
    out = []
    last = None
    run = 0
    for ch in text:
        if ch.isupper():
            c = "X"
        elif ch.islower():
            c = "x"
        elif ch.isdigit():
            c = "d"
        else:
            c = ch
        if c == last:
            run += 1
        else:
            last = c
            run = 1
        if run <= 4:
            out.append(c)
    return "".join(out)


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int
    norm: str = field(init=False)
    prefix: str = field(init=False)
    suffix: str = field(init=False)
    shape: str = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "norm", self.text.lower())
        object.__setattr__(self, "prefix", self.text[:1])
        object.__setattr__(self, "suffix", self.text[-3:])
        object.__setattr__(self, "shape", shape_of(self.text))

    def attr(self, name: str) -> str:
        return getattr(self, name.lower())


@dataclass(frozen=True)
class TokenizedDocument:
    doc_id: str
    tokens: tuple

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    @property
    def norms(self) -> list:
        return [t.norm for t in self.tokens]

    def char_span(self, start_tok: int, end_tok: int) -> tuple:
        """Character offsets covered by tokens ``[start_tok, end_tok)``."""
        return self.tokens[start_tok].start, self.tokens[end_tok - 1].end

    def token_range(self, start: int, end: int) -> tuple:
        """Token range ``[i, j)`` intersecting characters ``[start, end)``.

        Returns ``(i, i)`` when no token intersects.
        """
        idx = [k for k, t in enumerate(self.tokens) if t.start < end and t.end > start]
        if not idx:
            return (0, 0)
        return idx[0], idx[-1] + 1


def _is_word_char(ch: str) -> bool:
    return ch.isalnum()


def tokenize(text: str, doc_id: str = "") -> TokenizedDocument:
    """Split on whitespace and peel leading/trailing punctuation characters.

    Internal punctuation (hyphens, slashes, decimal points) stays inside
    the token, so ``3/4`` and ``mitralisklep-insufficientie`` are single
    tokens while ``45%`` becomes ``45`` and ``%``.
    """
    tokens = []
    n = len(text)
    i = 0
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        a, b = i, j
        lead = []
        while a < b and not _is_word_char(text[a]):
            lead.append(Token(text[a], a, a + 1))
            a += 1
        trail = []
        while b > a and not _is_word_char(text[b - 1]):
            trail.append(Token(text[b - 1], b - 1, b))
            b -= 1
        tokens.extend(lead)
        if a < b:
            tokens.append(Token(text[a:b], a, b))
        tokens.extend(reversed(trail))
        i = j
    return TokenizedDocument(doc_id, tuple(tokens))


@lru_cache(maxsize=1 << 18)
def fnv1a64(data: bytes, salt: int = 0) -> int:
    h = _FNV_OFFSET
    for byte in salt.to_bytes(4, "little") + data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_attr(value: str, table_index: int, n_rows: int) -> int:
    """Row index of an attribute string in hash table ``table_index``."""
    if n_rows <= 0:
        raise ValueError("n_rows must be positive")
    return fnv1a64(value.encode("utf-8"), table_index) % n_rows


def hash_rows(doc: TokenizedDocument, rows) -> np.ndarray:
    """``(len(doc), 4)`` int array of hashed NORM/PREFIX/SUFFIX/SHAPE rows."""
    out = np.zeros((len(doc), len(ATTRS)), dtype=np.int64)
    for i, tok in enumerate(doc.tokens):
        for k, attr in enumerate(ATTRS):
            out[i, k] = hash_attr(tok.attr(attr), k, rows[k])
    return out
