"""Symbolic core - words, incidence matrices, sequence paths, cylinders and the metrics d_alpha.

Symbols are 0-based integers internally. The plain-text word format is 1-based and
comma separated, so the internal word ``(0, 1)`` is written ``"1,2"``.
"""

import itertools
import math
import threading
from collections.abc import Callable, Hashable, Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np

from .errors import BudgetExceededError, CensoredError, InadmissibleWordError

Word = tuple[int, ...]
EMPTY_WORD: Word = ()

DEFAULT_ENUMERATION_BUDGET = 2**20


@dataclass(frozen=True, eq=False)
class IncidenceStructure:
    """A 0/1 incidence matrix on a finite (or truncated countable) alphabet."""

    matrix: np.ndarray
    truncated: bool = False
    complete: bool = False

    def __post_init__(self) -> None:
        if self.complete:
            # every transition allowed: a zero-stride view stands in for the n x n block of ones
            size = int(np.shape(self.matrix)[0])
            object.__setattr__(self, "matrix", np.broadcast_to(np.int8(1), (size, size)))
            return
        matrix = np.array(self.matrix, dtype=np.int8)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] == 0:
            raise ValueError(f"incidence matrix must be square and non-empty, got shape {matrix.shape}")
        if not np.isin(matrix, (0, 1)).all():
            raise ValueError("incidence matrix entries must be 0 or 1")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def full(cls, size: int, truncated: bool = False) -> "IncidenceStructure":
        """The full shift on ``size`` symbols."""
        return cls(np.broadcast_to(np.int8(1), (size, size)), truncated=truncated, complete=True)

    @classmethod
    def golden_mean(cls) -> "IncidenceStructure":
        """The golden-mean shift: the word "22" is forbidden."""
        return cls(np.array([[1, 1], [1, 0]]))

    @property
    def alphabet_size(self) -> int:
        return int(self.matrix.shape[0])

    def allows(self, a: int, b: int) -> bool:
        return bool(self.matrix[a, b])

    def followers(self, a: int) -> np.ndarray:
        return np.flatnonzero(self.matrix[a])

    def prune(self) -> tuple["IncidenceStructure", tuple[int, ...]]:
        """Drop symbols with no admissible follower, repeatedly.

        Returns the pruned structure and the original indices of the kept symbols.
        """
        if self.complete:
            return self, tuple(range(self.alphabet_size))
        kept = np.arange(self.alphabet_size)
        matrix = self.matrix
        while True:
            alive = matrix.sum(axis=1) > 0
            if alive.all():
                break
            kept = kept[alive]
            matrix = matrix[np.ix_(alive, alive)]
            if matrix.size == 0:
                raise ValueError("pruning removed every symbol")
        return IncidenceStructure(matrix, truncated=self.truncated), tuple(int(k) for k in kept)

    def is_primitive(self) -> bool:
        """Wielandt's test: some power up to (n-1)^2 + 1 is strictly positive."""
        if self.complete:
            return True
        n = self.alphabet_size
        power = (self.matrix > 0).astype(np.int64)
        base = power.copy()
        for _ in range((n - 1) ** 2 + 1):
            if (power > 0).all():
                return True
            power = np.minimum(power @ base, 1)
        return bool((power > 0).all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IncidenceStructure):
            return NotImplemented
        if self.complete and other.complete:
            return self.truncated == other.truncated and self.alphabet_size == other.alphabet_size
        return self.truncated == other.truncated and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        if self.complete:
            return hash((self.truncated, "full", self.alphabet_size))
        return hash((self.truncated, np.ascontiguousarray(self.matrix).tobytes(), self.matrix.shape))

    def __reduce__(self) -> tuple[Callable[..., "IncidenceStructure"], tuple[Any, ...]]:
        # worker processes rebuild the zero-stride view instead of receiving n**2 bytes
        if self.complete:
            return (IncidenceStructure.full, (self.alphabet_size, self.truncated))
        return (IncidenceStructure, (np.array(self.matrix), self.truncated))


def parse_incidence(text: str) -> IncidenceStructure:
    """Parse the plain-text format: first line ``n``, then ``n`` rows of 0/1."""
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty incidence matrix text")
    size = int(lines[0])
    rows = [[int(v) for v in line.split()] for line in lines[1:]]
    if len(rows) != size or any(len(row) != size for row in rows):
        raise ValueError(f"expected {size} rows of {size} entries")
    return IncidenceStructure(np.array(rows))


def load_incidence(path: Path) -> IncidenceStructure:
    with open(path) as f:
        return parse_incidence(f.read())


def dump_incidence(incidence: IncidenceStructure, path: Path) -> None:
    rows = [" ".join(str(int(v)) for v in row) for row in incidence.matrix]
    with open(path, "w") as f:
        f.write("\n".join([str(incidence.alphabet_size), *rows]) + "\n")


def format_word(word: Iterable[int]) -> str:
    """Serialize a word as comma separated 1-based symbols."""
    return ",".join(str(s + 1) for s in word)


def parse_word(text: str) -> Word:
    text = text.strip()
    if not text:
        return EMPTY_WORD
    return tuple(int(s) - 1 for s in text.split(","))


def first_violation(incidence: IncidenceStructure, word: Iterable[int]) -> Optional[int]:
    """Index ``i`` of the first pair ``(w_i, w_{i+1})`` forbidden by ``A``, or None."""
    symbols = tuple(word)
    size = incidence.alphabet_size
    for i, s in enumerate(symbols):
        if not 0 <= s < size:
            return i
    for i, (a, b) in enumerate(itertools.pairwise(symbols)):
        if not incidence.matrix[a, b]:
            return i
    return None


def is_admissible(incidence: IncidenceStructure, word: Iterable[int]) -> bool:
    return first_violation(incidence, word) is None


def check_admissible(incidence: IncidenceStructure, word: Iterable[int]) -> Word:
    symbols = tuple(word)
    position = first_violation(incidence, symbols)
    if position is not None:
        raise InadmissibleWordError(symbols, position)
    return symbols


class _Tape:
    """Append-only memo of a symbol generator, shared by a path and its shifts."""

    def __init__(self, source: Iterator[int], incidence: Optional[IncidenceStructure]) -> None:
        self._source = source
        self._incidence = incidence
        self._lock = threading.Lock()
        self.symbols: list[int] = []

    def ensure(self, length: int) -> None:
        # already materialized prefixes are read without the lock
        if len(self.symbols) >= length:
            return
        with self._lock:
            while len(self.symbols) < length:
                try:
                    symbol = int(next(self._source))
                except StopIteration:
                    raise CensoredError("symbol path", len(self.symbols)) from None
                if self._incidence is not None and self.symbols:
                    previous = self.symbols[-1]
                    if not self._incidence.matrix[previous, symbol]:
                        raise InadmissibleWordError((previous, symbol), len(self.symbols) - 1)
                self.symbols.append(symbol)


class SymbolPath:
    """An infinite one-sided sequence produced by a deterministic generator.

    Equality of infinite paths is declared through ``key``: two paths are equal when
    they share a tape and offset, or carry the same key and offset.
    """

    def __init__(
        self,
        source: Iterator[int],
        key: Hashable,
        incidence: Optional[IncidenceStructure] = None,
    ) -> None:
        self._tape = _Tape(source, incidence)
        self._offset = 0
        self.key = key

    @classmethod
    def periodic(
        cls, prefix: Iterable[int], period: Iterable[int], incidence: Optional[IncidenceStructure] = None
    ) -> "SymbolPath":
        """The eventually periodic path ``prefix period period ...``."""
        head, cycle = tuple(prefix), tuple(period)
        if not cycle:
            raise ValueError("period must be non-empty")
        return cls(itertools.chain(head, itertools.cycle(cycle)), ("periodic", head, cycle), incidence)

    @classmethod
    def from_blocks(
        cls, blocks: Iterator[np.ndarray], key: Hashable, incidence: Optional[IncidenceStructure] = None
    ) -> "SymbolPath":
        """A path fed by successive arrays of symbols, e.g. from a seeded sampler."""
        return cls(itertools.chain.from_iterable(blocks), key, incidence)

    @classmethod
    def from_array(
        cls, codes: np.ndarray, key: Hashable, incidence: Optional[IncidenceStructure] = None
    ) -> "SymbolPath":
        """A path backed by a finite array; reading past its end raises CensoredError."""
        return cls(iter(np.asarray(codes).tolist()), key, incidence)

    def _view(self, offset: int) -> "SymbolPath":
        view = object.__new__(SymbolPath)
        view._tape = self._tape
        view._offset = offset
        view.key = self.key
        return view

    @property
    def horizon(self) -> int:
        """Number of symbols materialized so far, from this path's first position."""
        return max(len(self._tape.symbols) - self._offset, 0)

    def prefix(self, n: int) -> Word:
        """The word omega|_n."""
        if n < 0:
            raise ValueError("prefix length must be non-negative")
        self._tape.ensure(self._offset + n)
        return tuple(self._tape.symbols[self._offset : self._offset + n])

    def array(self, n: int) -> np.ndarray:
        return np.asarray(self.prefix(n), dtype=np.int64)

    def symbol(self, i: int) -> int:
        """The 0-based ``i``-th symbol."""
        self._tape.ensure(self._offset + i + 1)
        return self._tape.symbols[self._offset + i]

    def shift(self, k: int = 1) -> "SymbolPath":
        """sigma^k of this path; shares the memo."""
        if k < 0:
            raise ValueError("shift must be non-negative")
        return self._view(self._offset + k)

    def declared_equal(self, other: "SymbolPath") -> bool:
        if self._offset != other._offset:
            return False
        return self._tape is other._tape or self.key == other.key

    def __repr__(self) -> str:
        return f"SymbolPath(key={self.key!r}, offset={self._offset}, horizon={self.horizon})"


class Wedge(NamedTuple):
    """Length of the common initial block; ``exceeds`` means ``length >= horizon``."""

    length: int
    exceeds: bool


def wedge_length(omega: SymbolPath, tau: SymbolPath, horizon: int) -> Wedge:
    """|omega ^ tau|, or the signal that it reaches ``horizon``."""
    if omega.declared_equal(tau):
        return Wedge(horizon, True)
    left, right = omega.prefix(horizon), tau.prefix(horizon)
    for i, (a, b) in enumerate(zip(left, right)):
        if a != b:
            return Wedge(i, False)
    return Wedge(horizon, True)


@dataclass(frozen=True)
class UltrametricSpec:
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def from_wedge(self, length: int) -> float:
        return math.exp(-self.alpha * length)


def d_alpha(
    omega: SymbolPath, tau: SymbolPath, spec: UltrametricSpec, horizon: int, floor_zero: bool = False
) -> float:
    """d_alpha(omega, tau) = exp(-alpha |omega ^ tau|).

    When the paths agree up to ``horizon`` the value is the bound exp(-alpha horizon),
    or 0 when ``floor_zero`` is set.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    wedge = wedge_length(omega, tau, horizon)
    if wedge.exceeds and floor_zero:
        return 0.0
    return spec.from_wedge(wedge.length)


@dataclass(frozen=True)
class Cylinder:
    word: Word

    @property
    def depth(self) -> int:
        return len(self.word)

    def contains(self, path: SymbolPath) -> bool:
        return path.prefix(self.depth) == self.word

    def contains_word(self, word: Word) -> bool:
        return tuple(word[: self.depth]) == self.word


def cylinder_depth(r: float, spec: UltrametricSpec) -> int:
    """n_r: the least n with exp(-alpha n) < r, so that B(rho, r) = [rho|_{n_r}] for open balls."""
    if not 0 < r <= 1:
        raise ValueError(f"radius must lie in (0, 1], got {r}")
    depth = math.floor(-math.log(r) / spec.alpha) + 1
    while spec.from_wedge(depth) >= r:
        depth += 1
    while depth > 0 and spec.from_wedge(depth - 1) < r:
        depth -= 1
    return depth


def ball_to_cylinder(rho: SymbolPath, r: float, spec: UltrametricSpec) -> Cylinder:
    return Cylinder(rho.prefix(cylinder_depth(r, spec)))


def _reach(matrix: np.ndarray, steps: int) -> np.ndarray:
    """Boolean reachability in exactly ``steps`` transitions."""
    size = matrix.shape[0]
    reach = np.eye(size, dtype=bool)
    step = matrix.astype(bool)
    for _ in range(steps):
        reach = (reach.astype(np.int64) @ step.astype(np.int64)) > 0
    return reach


def is_finitely_irreducible(incidence: IncidenceStructure, max_len: int) -> Optional[tuple[Word, ...]]:
    """A witness set Lambda with words of length <= max_len, or None when none is found.

    For every ordered pair (i, j) the shortest, lexicographically least connecting word
    omega with i omega j admissible is selected.
    """
    if incidence.complete:
        return (EMPTY_WORD,)
    matrix = incidence.matrix.astype(bool)
    size = incidence.alphabet_size
    # reach[L][a, b]: a path a -> b with exactly L transitions
    reach = [_reach(matrix, steps) for steps in range(max_len + 2)]
    witnesses: set[Word] = set()
    for i, j in itertools.product(range(size), repeat=2):
        length = next((L for L in range(max_len + 1) if reach[L + 1][i, j]), None)
        if length is None:
            return None
        word: list[int] = []
        current = i
        for position in range(length):
            remaining = length - position
            current = next(
                int(c) for c in np.flatnonzero(matrix[current]) if reach[remaining][c, j]
            )
            word.append(current)
        witnesses.add(tuple(word))
    return tuple(sorted(witnesses, key=lambda w: (len(w), w)))


def count_admissible(incidence: IncidenceStructure, n: int) -> int:
    """|E^n_A|, exact in Python integers."""
    if n == 0:
        return 1
    counts = [1] * incidence.alphabet_size
    rows = [incidence.followers(a).tolist() for a in range(incidence.alphabet_size)]
    for _ in range(n - 1):
        counts = [sum(counts[b] for b in rows[a]) for a in range(incidence.alphabet_size)]
    return sum(counts)


def admissible_array(
    incidence: IncidenceStructure, n: int, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> np.ndarray:
    """All words of E^n_A as rows of an array, in lexicographic order."""
    needed = count_admissible(incidence, n)
    if needed > budget:
        raise BudgetExceededError(f"enumeration of E^{n}_A", needed, budget)
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    words = np.arange(incidence.alphabet_size, dtype=np.int64)[:, None]
    matrix = incidence.matrix.astype(bool)
    for _ in range(n - 1):
        rows, followers = np.nonzero(matrix[words[:, -1]])
        words = np.hstack([words[rows], followers[:, None]])
    return words


def enumerate_admissible(
    incidence: IncidenceStructure, n: int, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> list[Word]:
    return [tuple(int(s) for s in row) for row in admissible_array(incidence, n, budget)]


def match_lengths(codes: np.ndarray, target: np.ndarray, start: int, stop: int, max_depth: int) -> np.ndarray:
    """|sigma^n(codes) ^ target| for n in [start, stop), capped at ``max_depth``.

    ``codes`` must hold at least ``stop + max_depth - 1`` symbols; the cap is lowered
    where fewer are available.
    """
    positions = np.arange(start, stop)
    lengths = np.zeros(positions.size, dtype=np.int64)
    alive = np.arange(positions.size)
    depth = min(max_depth, len(target))
    for j in range(depth):
        index = positions[alive] + j
        inside = index < codes.size
        alive = alive[inside]
        alive = alive[codes[index[inside]] == target[j]]
        if alive.size == 0:
            break
        lengths[alive] += 1
    return lengths


def cylinder_hits(codes: np.ndarray, word: Word, positions: int) -> np.ndarray:
    """For a batch of codes (rows), whether sigma^n lies in [word] for n < positions."""
    hits = np.ones((codes.shape[0], positions), dtype=bool)
    for j, symbol in enumerate(word):
        hits &= codes[:, j : j + positions] == symbol
    return hits
