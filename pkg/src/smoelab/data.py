"""Byte-level corpora, deterministic splits, window batching and bundled synthetic text."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Corpus:
    raw: bytes
    vocab: dict[int, int]  # byte value -> id
    bounds: tuple[int, int, int, int]  # 0, end_train, end_valid, end_test
    unk_id: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + (1 if self.unk_id is not None else 0)

    def split_bytes(self, name: str) -> bytes:
        i = {"train": 0, "valid": 1, "test": 2}[name]
        return self.raw[self.bounds[i]:self.bounds[i + 1]]

    def ids(self, name: str) -> np.ndarray:
        if name not in self._cache:
            self._cache[name] = self.encode(self.split_bytes(name))
        return self._cache[name]

    def encode(self, data: bytes) -> np.ndarray:
        lut = np.full(256, -1 if self.unk_id is None else self.unk_id, dtype=np.int64)
        for b, i in self.vocab.items():
            lut[b] = i
        out = lut[np.frombuffer(data, dtype=np.uint8)]
        if (out < 0).any():
            raise DataError("byte outside the vocabulary")
        return out

    def decode(self, ids) -> bytes:
        inv = {i: b for b, i in self.vocab.items()}
        return bytes(inv.get(int(i), ord("?")) for i in ids)


def build_corpus(raw: bytes, fractions=(0.9, 0.05, 0.05)) -> Corpus:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(raw)
    e_train = int(np.floor(fractions[0] * n))
    e_valid = e_train + int(np.floor(fractions[1] * n))
    bounds = (0, e_train, e_valid, n)
    for name, (a, b) in zip(("train", "valid", "test"), zip(bounds, bounds[1:])):
        if b <= a:
            raise DataError(f"empty {name} split ({n} bytes, fractions {fractions})")
    train = raw[:e_train]
    present = sorted(set(train))
    vocab = {b: i for i, b in enumerate(present)}
    unseen = set(raw[e_train:]) - set(present)
    unk = len(vocab) if unseen else None
    return Corpus(raw, vocab, bounds, unk)


def load_corpus(path: str | Path, max_bytes: int | None = None, fractions=(0.9, 0.05, 0.05)) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read(max_bytes) if max_bytes else fh.read()
    return build_corpus(raw, fractions)


def batcher(ids: np.ndarray, context: int, batch: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of (inputs, targets) windows; targets are inputs shifted by one."""
    ids = np.asarray(ids)
    n_starts = len(ids) - context
    if n_starts < 1:
        raise DataError(f"split of {len(ids)} tokens is too short for context {context}")
    offsets = np.arange(context + 1)
    while True:
        starts = rng.integers(0, n_starts, size=batch)
        win = ids[starts[:, None] + offsets]
        yield win[:, :-1], win[:, 1:]


def eval_windows(ids: np.ndarray, context: int, max_windows: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (inputs, targets) windows covering the split."""
    ids = np.asarray(ids)
    n = (len(ids) - 1) // context
    if n < 1:
        raise DataError(f"split of {len(ids)} tokens holds no full window of {context}")
    if max_windows:
        n = min(n, max_windows)
    x = ids[: n * context].reshape(n, context)
    y = ids[1: n * context + 1].reshape(n, context)
    return x, y


# -- bundled synthetic corpora -----------------------------------------------

def repeated_pattern(n_bytes: int, pattern: bytes = b"the quick brown fox jumps over the lazy dog. ") -> bytes:
    reps = n_bytes // len(pattern) + 1
    return (pattern * reps)[:n_bytes]


_CONS = "bcdfghjklmnprstvwz"
_VOW = "aeiou"


def _make_lexicon(rng: random.Random, size: int) -> list[str]:
    words = set()
    while len(words) < size:
        n_syl = rng.choice((1, 1, 2, 2, 2, 3, 3, 4))
        w = "".join(rng.choice(_CONS) + rng.choice(_VOW) + (rng.choice(_CONS) if rng.random() < 0.3 else "")
                    for _ in range(n_syl))
        words.add(w)
    return sorted(words)


def synthetic_wiki(n_bytes: int = 1_000_000, seed: int = 0) -> bytes:
    """Deterministic enwik8-flavoured text: XML page headers, prose, links, tables and numbers.

    The regimes have distinct byte statistics, so there is real structure for
    a router to exploit. Used when no real corpus file is available.
    """
    rng = random.Random(seed)
    lex = _make_lexicon(rng, 3000)
    ranks = np.arange(1, len(lex) + 1)
    zipf = (1.0 / ranks) / (1.0 / ranks).sum()
    cum = np.cumsum(zipf)
    titles = [w.capitalize() for w in lex[:400]]

    def word() -> str:
        return lex[int(np.searchsorted(cum, rng.random()))]

    def sentence() -> str:
        ws = [word() for _ in range(rng.randint(4, 16))]
        for i in range(len(ws)):
            r = rng.random()
            if r < 0.06:
                ws[i] = f"[[{rng.choice(titles)}]]"
            elif r < 0.08:
                ws[i] = str(rng.randint(1000, 2024))
            elif r < 0.1:
                ws[i] = ws[i] + ","
        ws[0] = ws[0].capitalize()
        return " ".join(ws) + rng.choice((".", ".", ".", ";", "!"))

    out: list[str] = []
    size = 0
    page = 0
    while size < n_bytes:
        page += 1
        title = rng.choice(titles) + (" " + rng.choice(titles) if rng.random() < 0.4 else "")
        parts = [f"  <page>\n    <title>{title}</title>\n    <id>{page}</id>\n    <revision>\n"
                 f"      <timestamp>{rng.randint(2001, 2006)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
                 f"T{rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}:00Z</timestamp>\n      <text xml:space=\"preserve\">"]
        for _ in range(rng.randint(2, 6)):
            parts.append(" ".join(sentence() for _ in range(rng.randint(2, 7))) + "\n\n")
            if rng.random() < 0.3:
                parts.append(f"== {rng.choice(titles)} ==\n")
            if rng.random() < 0.15:
                rows = "".join(f"|-\n| {word()} || {rng.randint(0, 99999)} || {rng.random():.3f}\n"
                               for _ in range(rng.randint(2, 6)))
                parts.append("{| class=\"wikitable\"\n" + rows + "|}\n")
        parts.append("</text>\n    </revision>\n  </page>\n")
        chunk = "".join(parts)
        out.append(chunk)
        size += len(chunk)
    return "".join(out).encode("ascii")[:n_bytes]


SYNTHETIC = {
    "repeated": lambda n, seed=0: repeated_pattern(n),
    "wiki": synthetic_wiki,
}
