"""First-return maps.

An induced system restricts a Markov base (a Gibbs state on a shift, optionally
carried by an affine Markov map) to a region made of partition cells. Return
times are always read off symbol codes, so points and codes never disagree.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .errors import BudgetExceededError, CensoredError, DegenerateMeasureError, NonMarkovRegionError
from .expanding import (
    BUILTIN_MAPS,
    AffineMarkovMap,
    ball_mass,
    distance,
    itinerary,
    itinerary_window,
    iterate,
    orbit_from_itinerary,
)
from .gdms import GDMS, Mobius, single_vertex
from .hitting import interval_measure, records_from_distances
from .symbolic import Word, check_admissible
from .thermo import GibbsState, MarkovSampler, refine_words, seed_stream, taboo_hitting

logger = logging.getLogger(__name__)

Number = Union[float, Fraction]


@dataclass(frozen=True, eq=False)
class MarkovBase:
    """A Gibbs state on E_A^infinity, optionally realized on the cells of an affine Markov map."""

    state: GibbsState
    tmap: Optional[AffineMarkovMap] = None

    def __post_init__(self) -> None:
        if self.tmap is not None and self.tmap.incidence != self.state.incidence:
            raise ValueError("the Gibbs state lives on a different incidence matrix than the map's coding")

    def sampler(self, rng: np.random.Generator) -> MarkovSampler:
        return self.state.sampler(rng)


@dataclass(frozen=True)
class Region:
    """A union of cylinders [w], all refined to a common depth."""

    words: tuple[Word, ...]

    @property
    def depth(self) -> int:
        return len(self.words[0]) if self.words else 0

    def mask(self, codes: np.ndarray, length: int) -> np.ndarray:
        """Whether position n lies in the region, for n < length (last axis of ``codes``)."""
        inside = np.zeros((*codes.shape[:-1], length), dtype=bool)
        for word in self.words:
            hit = np.ones_like(inside)
            for j, symbol in enumerate(word):
                hit &= codes[..., j : j + length] == symbol
            inside |= hit
        return inside

    def contains_word(self, word: Sequence[int]) -> bool:
        return tuple(word[: self.depth]) in self.words

    def intervals(self, tmap: AffineMarkovMap) -> list[tuple[Fraction, Fraction]]:
        cells = sorted(tmap.cell_interval(w) for w in self.words)
        merged: list[tuple[Fraction, Fraction]] = []
        for lo, hi in cells:
            if merged and merged[-1][1] == lo:
                merged[-1] = (merged[-1][0], hi)
            else:
                merged.append((lo, hi))
        return merged


def make_region(words: Sequence[Sequence[int]], base: MarkovBase) -> Region:
    if not words:
        raise DegenerateMeasureError("empty region")
    checked = [check_admissible(base.state.incidence, w) for w in words]
    depth = max(len(w) for w in checked)
    return Region(tuple(sorted(refine_words(checked, base.state.incidence, depth))))


def _exact(value: Union[Number, str]) -> Fraction:
    return Fraction(str(value)) if isinstance(value, float) else Fraction(value)


def region_from_intervals(
    base: MarkovBase, intervals: Sequence[tuple[Number, Number]], max_depth: int = 16
) -> Region:
    """Decompose right-open intervals into partition cells; NonMarkovRegionError if they are not unions of cells."""
    if base.tmap is None:
        raise NonMarkovRegionError("interval regions need an interval map")
    tmap = base.tmap
    words: list[Word] = []
    for a, b in intervals:
        a, b = _exact(a), _exact(b)
        if not 0 <= a < b <= 1:
            raise NonMarkovRegionError(f"[{a}, {b}) is not a sub-interval of [0, 1)")
        stack: list[Word] = [(s,) for s in range(base.state.alphabet_size)]
        while stack:
            word = stack.pop()
            lo, hi = tmap.cell_interval(word)
            if hi <= a or lo >= b:
                continue
            if a <= lo and hi <= b:
                words.append(word)
            elif len(word) >= max_depth:
                raise NonMarkovRegionError(f"[{a}, {b}) is not a union of cells of order <= {max_depth}")
            else:
                stack.extend((*word, int(s)) for s in base.state.incidence.followers(word[-1]))
    return make_region(words, base)


@dataclass(frozen=True, eq=False)
class InducedSystem:
    """(X_hat, T_hat, mu_hat): the first-return map of the base to a region of positive mass."""

    base: MarkovBase
    region: Region
    mass: float

    def conditional(self, measure: float) -> float:
        """mu_hat(B) = mu(B) / mu(X_hat) for B inside X_hat."""
        return measure / self.mass

    def contains(self, x: Union[Number, np.ndarray]) -> bool:
        if isinstance(x, np.ndarray):
            return self.region.contains_word(x.tolist())
        if self.base.tmap is None:
            raise ValueError("points need an interval map; pass codes instead")
        return any(lo <= x < hi for lo, hi in self.region.intervals(self.base.tmap))

    def margin(self, y: Number) -> float:
        """Distance from y to the boundary of the region's interval containing it (0 when outside)."""
        if self.base.tmap is None:
            raise ValueError("margins need an interval map")
        for lo, hi in self.region.intervals(self.base.tmap):
            if lo <= y < hi:
                return float(min(Fraction(y) - lo, hi - Fraction(y)))
        return 0.0


def induce(base: MarkovBase, region: Region) -> InducedSystem:
    mass = float(sum(base.state.cylinder(w) for w in region.words))
    if mass <= 0:
        raise DegenerateMeasureError("the base set has zero mass")
    if base.tmap is not None and base.tmap.name not in BUILTIN_MAPS:
        logger.warning("user-supplied map '%s': the induced conditional measure is not verified", base.tmap.name)
    return InducedSystem(base, region, mass)


@dataclass(frozen=True)
class ReturnTime:
    value: Optional[int]
    horizon: int

    @property
    def censored(self) -> bool:
        return self.value is None


def first_return_time(induced: InducedSystem, x: Union[Number, np.ndarray], horizon: int) -> ReturnTime:
    """t(x): the least n >= 1 with T^n x in X_hat; points iterate exactly, codes are scanned."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not induced.contains(x):
        raise ValueError(f"{x} is not in the base set")
    if isinstance(x, np.ndarray):
        length = min(horizon + 1, x.size - induced.region.depth + 1)
        hits = np.flatnonzero(induced.region.mask(x, length)[1:])
        if hits.size:
            return ReturnTime(int(hits[0]) + 1, horizon)
        if length < horizon + 1:
            raise CensoredError("code too short for the return time", length - 1)
        return ReturnTime(None, horizon)
    tmap = induced.base.tmap
    point = Fraction(x)
    for n in range(1, horizon + 1):
        point = tmap.apply(point)
        if induced.contains(point):
            return ReturnTime(n, horizon)
    return ReturnTime(None, horizon)


def induced_map(induced: InducedSystem, x: Number, horizon: int) -> Number:
    """T_hat(x) = T^{t(x)}(x), exact for Fraction inputs."""
    t = first_return_time(induced, x, horizon)
    if t.censored:
        raise CensoredError("first return", horizon)
    point = Fraction(x)
    for _ in range(t.value):
        point = induced.base.tmap.apply(point)
    return point


def visit_times(induced: InducedSystem, codes: np.ndarray, horizon: int) -> np.ndarray:
    """Times n in 1..horizon with T^n x in X_hat."""
    return np.flatnonzero(induced.region.mask(codes, horizon + 1)[1:]) + 1


def return_sums(induced: InducedSystem, codes: np.ndarray, L: int, horizon: int) -> np.ndarray:
    """A_l(x) = sum_{i < l} t(T_hat^i x) for l = 1..L; censored entries are left out."""
    return visit_times(induced, codes, horizon)[:L]


@dataclass(frozen=True)
class ReturnSumCheck:
    points: int
    steps: int
    mismatches: int
    censored: int

    @property
    def holds(self) -> bool:
        return self.mismatches == 0


def check_return_sums(induced: InducedSystem, points: Sequence[Number], L: int, horizon: int) -> ReturnSumCheck:
    """T_hat^l(x) = T^{A_l(x)}(x) for l = 1..L, pointwise and exactly.

    A_l is taken from ``return_sums`` on the itinerary of x, T_hat^l from ``induced_map``.
    """
    tmap = induced.base.tmap
    if tmap is None:
        raise ValueError("the return-sum identity is checked on an interval map")
    mismatches = censored = 0
    for x in points:
        x = Fraction(x)
        codes = np.array(itinerary(tmap, x, horizon + induced.region.depth + 1))
        sums = return_sums(induced, codes, L, horizon)
        if sums.size < L:
            censored += 1
        point = x
        for l, total in enumerate(sums.tolist(), start=1):
            point = induced_map(induced, point, horizon)
            if point != iterate(tmap, x, total).point:
                mismatches += 1
                logger.debug("T_hat^%d(%s) != T^%d(%s)", l, x, total, x)
                break
    return ReturnSumCheck(len(points), L, mismatches, censored)


def _first_entries(
    sampler: MarkovSampler, heads: np.ndarray, region: Region, horizon: int, block: int = 64
) -> np.ndarray:
    """First n in 1..horizon with sigma^n in the region, per row of ``heads``; -1 when censored.

    ``heads`` holds the first ``depth`` symbols of each path; the chain is extended in blocks.
    """
    depth = region.depth
    times = np.full(heads.shape[0], -1, dtype=np.int64)
    pending = np.arange(heads.shape[0])
    buffer, offset, next_start = heads, 0, 1
    while pending.size and next_start <= horizon:
        extension = sampler.paths(pending.size, block + 1, start=buffer[:, -1])[:, 1:]
        buffer = np.hstack([buffer, extension])
        last_start = min(offset + buffer.shape[1] - depth, horizon)
        shift = next_start - offset
        count = last_start - next_start + 1
        inside = region.mask(buffer[:, shift:], count)
        hit = inside.any(axis=1)
        times[pending[hit]] = next_start + inside[hit].argmax(axis=1)
        pending, buffer = pending[~hit], buffer[~hit]
        next_start = last_start + 1
        # keep the symbols from next_start - 1 on: the last one seeds the next extension
        buffer, offset = buffer[:, next_start - 1 - offset :], next_start - 1
    return times


def sample_conditional(
    induced: InducedSystem, rng: np.random.Generator, n_samples: int, chunk: int = 100_000
) -> tuple[MarkovSampler, np.ndarray]:
    """Heads (first ``depth`` symbols) of mu_hat-distributed points, by rejection from the base sampler."""
    sampler = induced.base.sampler(rng)
    depth = induced.region.depth
    accepted: list[np.ndarray] = []
    total = 0
    while total < n_samples:
        heads = sampler.paths(chunk, depth)
        keep = heads[induced.region.mask(heads, 1)[:, 0]]
        accepted.append(keep)
        total += keep.shape[0]
    return sampler, np.vstack(accepted)[:n_samples]


@dataclass(frozen=True)
class KacResult:
    mean: float
    target: float
    stderr: float
    n_samples: int
    censored_fraction: float

    @property
    def z(self) -> float:
        return abs(self.mean - self.target) / self.stderr if self.stderr > 0 else math.inf


def kac_check(induced: InducedSystem, n_samples: int, seed: int, horizon: int = 100_000, chunk: int = 100_000) -> KacResult:
    """Empirical mean of t under mu_hat against 1 / mu(X_hat)."""
    rng = seed_stream(seed, 0)
    times: list[np.ndarray] = []
    for start in range(0, n_samples, chunk):
        sampler, heads = sample_conditional(induced, rng, min(chunk, n_samples - start), chunk)
        times.append(_first_entries(sampler, heads, induced.region, horizon))
    t = np.concatenate(times)
    censored = float((t < 0).mean())
    if censored > 0.01:
        logger.warning("%.2f%% of return times censored at horizon %d", 100 * censored, horizon)
    kept = t[t > 0].astype(float)
    stderr = float(kept.std(ddof=1) / math.sqrt(kept.size)) if kept.size > 1 else math.inf
    return KacResult(float(kept.mean()), 1 / induced.mass, stderr, n_samples, censored)


@dataclass(frozen=True)
class ReturnSpectrum:
    masses: np.ndarray

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @property
    def tail(self) -> float:
        return max(1.0 - self.total, 0.0)

    @property
    def mean(self) -> float:
        return float((np.arange(1, self.masses.size + 1) * self.masses).sum())


def return_time_spectrum(induced: InducedSystem, max_n: int) -> ReturnSpectrum:
    """mu_hat(t = n) for n = 1..max_n by taboo powers of the higher-block chain."""
    return ReturnSpectrum(taboo_hitting(induced.base.state, induced.region.words, max_n, start="region"))


@dataclass(frozen=True)
class IfsBranch:
    """phi_A = (T^n|_A)^{-1}: the inverse of the first return on the domain A = [word]."""

    word: Word
    return_time: int
    mass: float
    conditional_mass: float
    contraction: float
    interval: Optional[tuple[Fraction, Fraction]] = None
    onto: bool = True

    def phi(self, tmap: AffineMarkovMap, z: Number) -> Number:
        for symbol in reversed(self.word[: self.return_time]):
            z = tmap.inverse(symbol, z)
        return z


@dataclass(frozen=True)
class LocalIfs:
    induced: InducedSystem
    branches: tuple[IfsBranch, ...]
    max_return: int
    uncovered: float
    contraction: float

    def to_gdms(self) -> GDMS:
        """The branches as a single-vertex affine IFS on the base interval."""
        tmap = self.induced.base.tmap
        spans = self.induced.region.intervals(tmap) if tmap is not None else []
        if len(spans) != 1:
            raise NonMarkovRegionError("the IFS needs an interval map and a base set that is one interval")
        lo, hi = spans[0]
        maps = []
        for branch in self.branches:
            a_lo, a_hi = branch.interval
            scale = (a_hi - a_lo) / (hi - lo)
            maps.append(Mobius.affine(scale, a_lo - scale * lo))
        if tmap.name not in BUILTIN_MAPS:
            logger.warning("user-supplied map '%s': the conditional measure is not checked against the IFS", tmap.name)
        return single_vertex(f"{tmap.name}|first-return", maps, (lo, hi), self.contraction, family="affine")


def build_local_ifs(induced: InducedSystem, max_return: int, depth_budget: int = 1 << 16) -> LocalIfs:
    """Enumerate the first-return branches of return time <= max_return.

    A domain is a cylinder [u v] with v a region word, |u| = n and no region word
    starting at positions 1..n-1; T^n maps it onto [v]. Each branch is checked to be
    onto (exact endpoints) when the base carries an interval map.
    """
    base, region = induced.base, induced.region
    depth, words = region.depth, set(region.words)
    tmap = base.tmap
    alpha = 1.0
    branches: list[IfsBranch] = []
    stack: list[Word] = list(region.words)
    visited = 0
    while stack:
        word = stack.pop()
        visited += 1
        if visited > depth_budget:
            raise BudgetExceededError("first-return branches", visited, depth_budget)
        n = len(word) - depth
        if n >= 1 and word[n:] in words:
            mass = base.state.cylinder(word)
            if tmap is not None:
                interval = tmap.cell_interval(word)
                slope = math.prod((tmap.branches[s].slope for s in word[:n]), start=Fraction(1))
                target = tmap.cell_interval(word[n:])
                image = interval[0]
                for s in word[:n]:
                    image = tmap.branches[s].apply(image)
                onto = image == target[0] and (interval[1] - interval[0]) * slope == target[1] - target[0]
                branches.append(IfsBranch(word, n, mass, mass / induced.mass, float(1 / slope), interval, onto))
            else:
                branches.append(IfsBranch(word, n, mass, mass / induced.mass, math.exp(-alpha * n)))
            continue
        if n >= max_return:
            continue
        for s in base.state.incidence.followers(word[-1]):
            stack.append((*word, int(s)))
    branches.sort(key=lambda b: (b.return_time, b.word))
    covered = sum(b.conditional_mass for b in branches)
    contraction = max((b.contraction for b in branches), default=0.0)
    return LocalIfs(induced, tuple(branches), max_return, max(1.0 - covered, 0.0), contraction)


@dataclass(frozen=True)
class HittingComparison:
    """Paired entry statistics of the base and the induced system at the base orbit's record radii."""

    radii: np.ndarray
    taus: np.ndarray
    induced_taus: np.ndarray
    ball_masses: np.ndarray
    identity: np.ndarray
    mass: float

    @property
    def base_values(self) -> np.ndarray:
        return self.taus * self.ball_masses

    @property
    def induced_values(self) -> np.ndarray:
        return self.induced_taus * self.ball_masses / self.mass

    @property
    def ratios(self) -> np.ndarray:
        return self.base_values / self.induced_values

    def settled(self, min_returns: int) -> np.ndarray:
        """Rows past ``min_returns`` returns, where A_L / L has settled near 1 / mu(X_hat)."""
        return self.induced_taus >= min_returns

    def rows(self, pair_id: int, min_returns: int = 1) -> list[list]:
        return [
            [
                pair_id,
                float(r),
                int(t),
                int(th),
                float(m),
                float(m / self.mass),
                float(t * m),
                float(th * m / self.mass),
                float(q),
                bool(ok),
                bool(th >= min_returns),
            ]
            for r, t, th, m, q, ok in zip(
                self.radii, self.taus, self.induced_taus, self.ball_masses, self.ratios, self.identity
            )
        ]


def compare_hitting_statistics(
    induced: InducedSystem, y: Number, codes: np.ndarray, horizon: int, r_max: Optional[float] = None
) -> HittingComparison:
    """tau mu(B) against tau_hat mu_hat(B) for the records of the orbit coded by ``codes``.

    ``codes`` codes a point of X_hat; only record radii with B(y, r) inside X_hat (and
    r <= r_max) are kept. tau_hat counts the returns up to tau, so A_{tau_hat} = tau.
    """
    tmap = induced.base.tmap
    if tmap is None:
        raise ValueError("hitting comparison needs an interval map")
    margin = induced.margin(y)
    if margin <= 0:
        raise ValueError(f"y = {y} is not an interior point of the base set")
    if not induced.region.contains_word(codes[: induced.region.depth].tolist()):
        raise ValueError("the orbit does not start in the base set")
    points = orbit_from_itinerary(tmap, codes, horizon + 1)
    records = records_from_distances(distance(points, float(y), tmap.circle), horizon).positive
    limit = min(margin, r_max) if r_max is not None else margin
    keep = records.radii <= limit
    radii, taus = records.radii[keep], records.times[keep]
    visits = visit_times(induced, codes, horizon)
    induced_taus = np.searchsorted(visits, taus, side="right")
    identity = visits[np.maximum(induced_taus - 1, 0)] == taus
    measure = interval_measure(tmap, induced.base.state)
    masses = np.array([ball_mass(measure, float(y), float(r), tmap.circle) for r in radii])
    return HittingComparison(radii, taus, induced_taus, masses, identity, induced.mass)


def sample_base_codes(induced: InducedSystem, rng: np.random.Generator, horizon: int) -> np.ndarray:
    """Codes of one mu_hat-typical point, long enough for an orbit of horizon + 1 points."""
    window = itinerary_window(induced.base.tmap) if induced.base.tmap is not None else 0
    sampler, heads = sample_conditional(induced, rng, 1, chunk=64)
    rest = sampler.continue_path(int(heads[0, -1]), horizon + window + 1 - heads.shape[1])
    return np.concatenate([heads[0], rest])


def sandwich_check(comparison: HittingComparison, tolerance: float = 1e-9) -> bool:
    """tau_hat (1/mu(X_hat) - eps) <= tau <= tau_hat (1/mu(X_hat) + eps) with eps = |A_L / L - 1/mu(X_hat)|, L = tau_hat."""
    target = 1 / comparison.mass
    for tau, tau_hat in zip(comparison.taus, comparison.induced_taus):
        if tau_hat < 1:
            return False
        eps = abs(tau / tau_hat - target)
        if not tau_hat * (target - eps) - tolerance <= tau <= tau_hat * (target + eps) + tolerance:
            return False
    return True


def record_equivalence(induced: InducedSystem, y: Number, codes: np.ndarray, horizon: int) -> bool:
    """Closest approaches of the base and the induced orbit to y coincide as points inside the margin."""
    tmap = induced.base.tmap
    points = orbit_from_itinerary(tmap, codes, horizon + 1)
    d = distance(points, float(y), tmap.circle)
    margin = induced.margin(y)
    base = records_from_distances(d, horizon)
    base_points = {float(points[n]) for n, r in zip(base.times, base.radii) if r < margin}
    visits = visit_times(induced, codes, horizon)
    induced_d = np.concatenate([[d[0]], d[visits]])
    hat = records_from_distances(induced_d, visits.size) if visits.size else None
    hat_points = (
        {float(points[visits[n - 1]]) for n, r in zip(hat.times, hat.radii) if r < margin} if hat is not None else set()
    )
    return base_points == hat_points


def induced_potential(
    induced: InducedSystem, g: Callable[[Number], float], x: Number, horizon: int
) -> float:
    """g_F(x) = sum_{k < tau_F(x)} g(T^k x)."""
    t = first_return_time(induced, x, horizon)
    if t.censored:
        raise CensoredError("induced potential", horizon)
    point, total = Fraction(x), 0.0
    for _ in range(t.value):
        total += float(g(float(point)))
        point = induced.base.tmap.apply(point)
    return total
