"""First-and-last-note (FLN) conditioning classes."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .corpus import check_phrase
from .errors import NoPairsError, ParseError, RangeError

EMPTY_LABEL = 0
DEFAULT_MIN_COUNT = 20


class FLNPair(NamedTuple):
    first: int | None
    last: int | None

    @property
    def is_empty(self) -> bool:
        return self.first is None


EMPTY = FLNPair(None, None)


def extract_fln(phrase: np.ndarray) -> FLNPair:
    """Highest pitch sounding at the first and at the last active step."""
    phrase = check_phrase(np.asarray(phrase))
    active = np.flatnonzero(phrase.any(axis=1))
    if active.size == 0:
        return EMPTY
    first = int(np.flatnonzero(phrase[active[0]])[-1])
    last = int(np.flatnonzero(phrase[active[-1]])[-1])
    return FLNPair(first, last)


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise RangeError(f"label {label} outside 0..{n_classes - 1}")
    v = np.zeros(n_classes, dtype=np.float32)
    v[label] = 1.0
    return v


@dataclass
class FLNClassDictionary:
    """Pairs seen more than ``min_count`` times, labelled 1..K by frequency.

    Label 0 is the empty phrase, label K+1 any pair outside the dictionary.
    """

    pairs: list[FLNPair]
    counts: list[int]
    min_count: int = DEFAULT_MIN_COUNT
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.pairs:
            raise NoPairsError("dictionary must hold at least one pair")
        self._index = {p: i + 1 for i, p in enumerate(self.pairs)}

    @property
    def K(self) -> int:
        return len(self.pairs)

    @property
    def n_classes(self) -> int:
        return self.K + 2

    @property
    def other_label(self) -> int:
        return self.K + 1

    def pair_to_label(self, pair: FLNPair) -> int:
        if pair.is_empty:
            return EMPTY_LABEL
        return self._index.get(FLNPair(*pair), self.other_label)

    def pair_for(self, label: int) -> FLNPair | None:
        """The concrete pair behind a label, or None for the reserved labels."""
        self.check_label(label)
        if 1 <= label <= self.K:
            return self.pairs[label - 1]
        return None

    def label(self, phrase: np.ndarray) -> int:
        return self.pair_to_label(extract_fln(phrase))

    def check_label(self, label: int) -> int:
        if not 0 <= int(label) < self.n_classes:
            raise RangeError(f"label {label} outside 0..{self.n_classes - 1}")
        return int(label)

    def one_hot(self, label: int) -> np.ndarray:
        return one_hot(label, self.n_classes)

    # serialization ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"K\t{self.K}", f"min_count\t{self.min_count}"]
        for i, (pair, count) in enumerate(zip(self.pairs, self.counts), start=1):
            lines.append(f"{i}\t{pair.first}\t{pair.last}\t{count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FLNClassDictionary":
        lines = text.splitlines()
        try:
            k_key, k = lines[0].split("\t")
            m_key, m = lines[1].split("\t")
            if (k_key, m_key) != ("K", "min_count"):
                raise ValueError("bad header")
            pairs, counts = [], []
            for expected, line in enumerate(lines[2:], start=1):
                label, first, last, count = line.split("\t")
                if int(label) != expected:
                    raise ValueError(f"label {label} out of order")
                pairs.append(FLNPair(int(first), int(last)))
                counts.append(int(count))
            if len(pairs) != int(k):
                raise ValueError("entry count does not match K")
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed FLN dictionary: {exc}") from exc
        return cls(pairs, counts, int(m))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "FLNClassDictionary":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def count_pairs(phrases: Iterable[np.ndarray]) -> Counter:
    counts: Counter = Counter()
    for p in phrases:
        pair = extract_fln(p)
        if not pair.is_empty:
            counts[pair] += 1
    return counts


def build_dictionary(phrases: Iterable[np.ndarray], min_count: int = DEFAULT_MIN_COUNT) -> FLNClassDictionary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = count_pairs(phrases)
    kept = [(pair, n) for pair, n in counts.items() if n > min_count]
    if not kept:
        raise NoPairsError(f"no FLN pair occurs more than {min_count} times")
    kept.sort(key=lambda item: (-item[1], item[0].first, item[0].last))
    return FLNClassDictionary([p for p, _ in kept], [n for _, n in kept], min_count)


def label(phrase: np.ndarray, dictionary: FLNClassDictionary) -> int:
    return dictionary.label(phrase)


def format_label_sequences(sequences: Iterable[Iterable[int]]) -> str:
    return "".join(" ".join(str(int(x)) for x in seq) + "\n" for seq in sequences)


def parse_label_sequences(text: str, n_classes: int | None = None, length: int = 17) -> list[list[int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            seq = [int(tok) for tok in line.split()]
        except ValueError as exc:
            raise RangeError(f"line {lineno}: {exc}") from exc
        if len(seq) != length:
            raise RangeError(f"line {lineno}: expected {length} labels, got {len(seq)}")
        if n_classes is not None and any(not 0 <= x < n_classes for x in seq):
            raise RangeError(f"line {lineno}: label outside 0..{n_classes - 1}")
        out.append(seq)
    return out
