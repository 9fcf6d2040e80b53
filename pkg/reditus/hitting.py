"""Hitting statistics: closest-approach records, entry statistics and divergence certificates.

Every system is seen through an adapter that samples orbits, measures distances to
a target and evaluates the measure of balls and Markov covers around it. The
record sequence (n_k, r_k) of an orbit determines tau_{B(y, r)} for every radius.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol, Union

import numpy as np
from scipy.stats import linregress

from .core import run_tasks
from .errors import DegenerateMeasureError, LadderInfeasibleError, UnsupportedFamilyError
from .expanding import (
    AffineMarkovMap,
    CodedMeasure,
    IntervalMeasure,
    LebesgueMeasure,
    MIN_RESOLVED_RADIUS,
    ball_mass,
    distance,
    itinerary,
    itinerary_window,
    markov_cover,
    orbit_from_itinerary,
)
from .gdms import ChaosGame, LimitMeasure, ball_measure, gdms_cover
from .symbolic import UltrametricSpec, Word, cylinder_depth, match_lengths
from .thermo import GibbsState, MixingFit, fit_mixing_constants, seed_stream, taboo_hitting

logger = logging.getLogger(__name__)

Number = Union[float, Fraction]


@dataclass(frozen=True)
class Orbit:
    """Positions 0..length-1 of one orbit (1-D) or a batch of orbits (2-D, one per row)."""

    codes: np.ndarray
    length: int
    points: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Target:
    code: np.ndarray
    point: Optional[float] = None


@dataclass(frozen=True)
class Cover:
    """R_r around a target: a cylinder word (symbolic) or a union of intervals."""

    mass: float
    word: Word = ()
    intervals: tuple[tuple[float, float], ...] = ()


class SystemAdapter(Protocol):
    name: str
    resolution: float
    default_radius: float

    @property
    def state(self) -> Optional[GibbsState]: ...

    def sample_orbit(self, rng: np.random.Generator, length: int) -> Orbit: ...

    def sample_orbits(self, rng: np.random.Generator, n_orbits: int, length: int) -> Orbit: ...

    def sample_target(self, rng: np.random.Generator) -> Target: ...

    def target_of(self, orbit: Orbit) -> Target: ...

    def distances(self, orbit: Orbit, target: Target) -> np.ndarray: ...

    def ball_mass(self, target: Target, r: float) -> float: ...

    def cover(self, target: Target, r: float) -> Cover: ...

    def in_cover(self, orbit: Orbit, target: Target, cover: Cover) -> np.ndarray: ...

    def exact_entry(self, target: Target, r: float, max_n: int) -> Optional[np.ndarray]: ...


def _stack_lengths(codes: np.ndarray, target: np.ndarray, length: int, depth: int) -> np.ndarray:
    lengths = np.zeros((*codes.shape[:-1], length), dtype=np.int64)
    alive = np.ones(lengths.shape, dtype=bool)
    for j in range(min(depth, target.size)):
        alive &= codes[..., j : j + length] == target[j]
        if not alive.any():
            break
        lengths += alive
    return lengths


@dataclass(frozen=True, eq=False)
class ShiftAdapter:
    """A Gibbs state on E_A^infinity with the ultrametric d_alpha."""

    gibbs: GibbsState
    metric: UltrametricSpec = field(default_factory=UltrametricSpec)
    max_depth: int = 64
    name: str = "shift"

    @property
    def state(self) -> GibbsState:
        return self.gibbs

    @property
    def resolution(self) -> float:
        return self.metric.from_wedge(self.max_depth - 1)

    @property
    def default_radius(self) -> float:
        return min(1.0, 1.5 * self.metric.from_wedge(1))

    def sample_orbit(self, rng: np.random.Generator, length: int) -> Orbit:
        codes = self.gibbs.sampler(rng).path(length + self.max_depth)
        return Orbit(_compact(codes), length)

    def sample_orbits(self, rng: np.random.Generator, n_orbits: int, length: int) -> Orbit:
        return Orbit(_compact(self.gibbs.sampler(rng).paths(n_orbits, length + self.max_depth)), length)

    def sample_target(self, rng: np.random.Generator) -> Target:
        return Target(self.gibbs.sampler(rng).path(self.max_depth))

    def target_of(self, orbit: Orbit) -> Target:
        return Target(np.asarray(orbit.codes[: self.max_depth], dtype=np.int64))

    def match(self, orbit: Orbit, target: Target) -> np.ndarray:
        if orbit.codes.ndim == 1:
            return match_lengths(orbit.codes, target.code, 0, orbit.length, self.max_depth)
        return _stack_lengths(orbit.codes, target.code, orbit.length, self.max_depth)

    def distances(self, orbit: Orbit, target: Target) -> np.ndarray:
        # a match of max_depth symbols is reported at the resolution floor, not as 0
        return np.exp(-self.metric.alpha * self.match(orbit, target))

    def word(self, target: Target, r: float) -> Word:
        depth = cylinder_depth(min(r, 1.0), self.metric)
        if depth > target.code.size:
            raise ValueError(f"radius {r!r} needs a cylinder deeper than the target code")
        return tuple(int(s) for s in target.code[:depth])

    def ball_mass(self, target: Target, r: float) -> float:
        return self.gibbs.cylinder(self.word(target, r))

    def cover(self, target: Target, r: float) -> Cover:
        word = self.word(target, r)
        return Cover(self.gibbs.cylinder(word), word=word)

    def in_cover(self, orbit: Orbit, target: Target, cover: Cover) -> np.ndarray:
        return self.match(orbit, target) >= len(cover.word)

    def exact_entry(self, target: Target, r: float, max_n: int) -> Optional[np.ndarray]:
        word = self.word(target, r)
        if not word:
            return np.r_[1.0, np.zeros(max_n - 1)]
        return taboo_hitting(self.gibbs, [word], max_n)


def _compact(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.int16) if codes.size and codes.max() < 2**15 else codes


@dataclass(frozen=True, eq=False)
class IntervalAdapter:
    """An affine Markov map carrying the push-forward of a symbolic Gibbs state."""

    tmap: AffineMarkovMap
    gibbs: GibbsState
    measure: Optional[IntervalMeasure] = None
    name: str = "interval"
    resolution: float = MIN_RESOLVED_RADIUS
    default_radius: float = 0.25

    def __post_init__(self) -> None:
        if not isinstance(self.tmap, AffineMarkovMap):
            raise UnsupportedFamilyError(f"{self.tmap.name} has no exact affine cells")
        if self.measure is None:
            object.__setattr__(self, "measure", interval_measure(self.tmap, self.gibbs))

    @property
    def state(self) -> GibbsState:
        return self.gibbs

    @property
    def window(self) -> int:
        return itinerary_window(self.tmap)

    def sample_orbit(self, rng: np.random.Generator, length: int) -> Orbit:
        codes = self.gibbs.sampler(rng).path(length + self.window)
        return Orbit(codes, length, orbit_from_itinerary(self.tmap, codes, length))

    def sample_orbits(self, rng: np.random.Generator, n_orbits: int, length: int) -> Orbit:
        codes = self.gibbs.sampler(rng).paths(n_orbits, length + self.window)
        return Orbit(codes, length, orbit_from_itinerary(self.tmap, codes, length))

    def orbit_of(self, x: Number, length: int) -> Orbit:
        """The orbit of a given point; exact for Fraction inputs."""
        if isinstance(x, Fraction):
            points, codes = [], []
            for _ in range(length):
                points.append(float(x))
                codes.append(self.tmap.symbol(x))
                x = self.tmap.apply(x)
            return Orbit(np.array(codes, dtype=np.int64), length, np.array(points))
        codes = np.array(itinerary(self.tmap, Fraction(x), length + self.window), dtype=np.int64)
        return Orbit(codes, length, orbit_from_itinerary(self.tmap, codes, length))

    def sample_target(self, rng: np.random.Generator) -> Target:
        codes = self.gibbs.sampler(rng).path(1 + self.window)
        return Target(codes, float(orbit_from_itinerary(self.tmap, codes, 1)[0]))

    def target_at(self, y: Number) -> Target:
        return Target(np.array(itinerary(self.tmap, Fraction(y), self.window), dtype=np.int64), float(y))

    def target_of(self, orbit: Orbit) -> Target:
        return Target(np.asarray(orbit.codes[: self.window]), float(orbit.points[0]))

    def distances(self, orbit: Orbit, target: Target) -> np.ndarray:
        return distance(orbit.points, target.point, self.tmap.circle)

    def ball_mass(self, target: Target, r: float) -> float:
        return ball_mass(self.measure, target.point, r, self.tmap.circle)

    def cover(self, target: Target, r: float) -> Cover:
        cover = markov_cover(self.tmap, self.measure, target.point, r)
        return Cover(cover.mass, intervals=((float(cover.lo), float(cover.hi)),))

    def in_cover(self, orbit: Orbit, target: Target, cover: Cover) -> np.ndarray:
        return _in_intervals(orbit.points, cover.intervals)

    def exact_entry(self, target: Target, r: float, max_n: int) -> Optional[np.ndarray]:
        return None


def interval_measure(tmap: AffineMarkovMap, gibbs: GibbsState) -> IntervalMeasure:
    # Lebesgue is the coded measure exactly when every transition weight is the cell width
    widths = np.array([float(b.hi - b.lo) for b in tmap.branches])
    if np.allclose(gibbs.stationary, widths) and np.allclose(gibbs.kernel, widths[None, :]):
        return LebesgueMeasure()
    return CodedMeasure(tmap, gibbs)


def _in_intervals(points: np.ndarray, intervals: Sequence[tuple[float, float]]) -> np.ndarray:
    inside = np.zeros(points.shape, dtype=bool)
    for lo, hi in intervals:
        inside |= (points >= lo) & (points < hi)
    return inside


@dataclass(frozen=True, eq=False)
class LimitSetAdapter:
    """The projected Gibbs state of a single-vertex GDMS on its limit set."""

    limit: LimitMeasure
    name: str = "limit-set"
    resolution: float = 1e-7
    default_radius: float = 0.25
    ball_options: dict = field(default_factory=dict)

    @property
    def state(self) -> None:
        return None

    def sample_orbit(self, rng: np.random.Generator, length: int) -> Orbit:
        orbit = ChaosGame(self.limit, rng).orbit(length)
        return Orbit(orbit.codes[:length], length, orbit.points)

    def sample_orbits(self, rng: np.random.Generator, n_orbits: int, length: int) -> Orbit:
        game = ChaosGame(self.limit, rng)
        runs = [game.orbit(length) for _ in range(n_orbits)]
        return Orbit(np.stack([r.codes[:length] for r in runs]), length, np.stack([r.points for r in runs]))

    def sample_target(self, rng: np.random.Generator) -> Target:
        return Target(np.zeros(0, dtype=np.int64), float(ChaosGame(self.limit, rng).points(1)[0]))

    def target_of(self, orbit: Orbit) -> Target:
        return Target(np.asarray(orbit.codes), float(orbit.points[0]))

    def distances(self, orbit: Orbit, target: Target) -> np.ndarray:
        return np.abs(orbit.points - target.point)

    def ball_mass(self, target: Target, r: float) -> float:
        return ball_measure(self.limit, target.point, r, **self.ball_options).value

    def cover(self, target: Target, r: float) -> Cover:
        cover = gdms_cover(self.limit.system, target.point, r)
        system = self.limit.system
        intervals = tuple(
            tuple(float(v) for v in system.word_map(w).image(*system.seed(w[-1]))) for w in cover.words
        )
        return Cover(sum(self.limit.cylinder(w) for w in cover.words), intervals=intervals)

    def in_cover(self, orbit: Orbit, target: Target, cover: Cover) -> np.ndarray:
        inside = np.zeros(orbit.points.shape, dtype=bool)
        for lo, hi in cover.intervals:
            inside |= (orbit.points >= lo) & (orbit.points <= hi)
        return inside

    def exact_entry(self, target: Target, r: float, max_n: int) -> Optional[np.ndarray]:
        return None


@dataclass(frozen=True)
class HittingRecords:
    """Closest approaches (n_k, r_k) of an orbit to a target, n_1 = 1."""

    times: np.ndarray
    radii: np.ndarray
    horizon: int
    terminal: bool = False

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def positive(self) -> "HittingRecords":
        """The records with r_k > 0."""
        keep = self.radii > 0
        return HittingRecords(self.times[keep], self.radii[keep], self.horizon, self.terminal)

    def tau(self, r: float) -> Optional[int]:
        """tau_{B(y, r)}(x) = n_k for r_k < r <= r_{k-1}; None when censored at the horizon."""
        below = np.flatnonzero(self.radii < r)
        return int(self.times[below[0]]) if below.size else None

    def rows(self, pair_id: int) -> list[list]:
        return [[pair_id, k + 1, int(n), float(r)] for k, (n, r) in enumerate(zip(self.times, self.radii))]


def records_from_distances(distances: np.ndarray, horizon: Optional[int] = None) -> HittingRecords:
    """Records of d(T^n x, y) for n = 1..horizon; ``distances[n]`` belongs to time n."""
    horizon = distances.size - 1 if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    d = np.asarray(distances[1 : horizon + 1], dtype=float)
    if d.size < horizon:
        raise ValueError(f"need distances up to time {horizon}, got {d.size}")
    running = np.minimum.accumulate(d)
    is_record = np.empty(d.size, dtype=bool)
    is_record[0] = True
    is_record[1:] = d[1:] < running[:-1]
    index = np.flatnonzero(is_record)
    times, radii = index + 1, d[index]
    hits = np.flatnonzero(radii == 0)
    if hits.size:
        return HittingRecords(times[: hits[0] + 1], radii[: hits[0] + 1], horizon, True)
    return HittingRecords(times, radii, horizon)


def record_sequence(adapter: SystemAdapter, orbit: Orbit, target: Target, horizon: int) -> HittingRecords:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if orbit.length <= horizon:
        raise ValueError(f"orbit has {orbit.length} points, horizon {horizon} needs {horizon + 1}")
    return records_from_distances(adapter.distances(orbit, target)[: horizon + 1], horizon)


def entry_time(distances: np.ndarray, r: float) -> Optional[int]:
    """Direct forward search: the least n >= 1 with d(T^n x, y) < r."""
    hits = np.flatnonzero(np.asarray(distances[1:]) < r)
    return int(hits[0]) + 1 if hits.size else None


@dataclass(frozen=True)
class EntryTable:
    """Rows (r, tau, mu(B), E_r = tau mu(B)) in order of decreasing r."""

    radii: np.ndarray
    taus: np.ndarray
    masses: np.ndarray
    values: np.ndarray
    running_max: np.ndarray
    censored: np.ndarray
    unresolved: np.ndarray
    depths: Optional[np.ndarray] = None

    def deep_min(self, first: int = 3) -> float:
        """min E over the rows from the ``first``-th on (1-based), ignoring censored rows."""
        valid = self.values[first - 1 :][~self.censored[first - 1 :]]
        return float(valid.min()) if valid.size else math.nan

    def rows(self, pair_id: int) -> list[list]:
        return [
            [pair_id, float(r), int(t) if not c else "", float(m), float(e) if not c else "", float(mx)]
            for r, t, m, e, mx, c in zip(
                self.radii, self.taus, self.masses, self.values, self.running_max, self.censored
            )
        ]


def _table(
    radii: np.ndarray,
    taus: np.ndarray,
    masses: np.ndarray,
    censored: np.ndarray,
    unresolved: np.ndarray,
    depths: Optional[np.ndarray] = None,
) -> EntryTable:
    values = np.where(censored, np.nan, taus * masses)
    running = np.fmax.accumulate(np.where(censored, -np.inf, values)) if values.size else values
    return EntryTable(radii, taus, masses, values, running, censored, unresolved, depths)


def entry_table(
    records: HittingRecords,
    mass: Callable[[float], float],
    radii: Optional[Sequence[float]] = None,
    resolution: float = 0.0,
) -> EntryTable:
    """E_r through the record/tau duality.

    Without a schedule the rows sit at the record radii with the statistic
    n_k mu(B(y, r_k)); the exact zero record, if any, is left out.
    """
    positive = records.positive
    if radii is None:
        schedule = positive.radii
        taus = positive.times.astype(np.int64)
        censored = np.zeros(schedule.size, dtype=bool)
    else:
        schedule = np.sort(np.asarray(radii, dtype=float))[::-1]
        found = [records.tau(float(r)) for r in schedule]
        censored = np.array([t is None for t in found], dtype=bool)
        taus = np.array([t if t is not None else 0 for t in found], dtype=np.int64)
    unresolved = schedule < resolution
    masses = np.array([mass(float(r)) if not u else math.nan for r, u in zip(schedule, unresolved)])
    if (masses[~unresolved] < 0).any() or (masses[~unresolved] > 1 + 1e-12).any():
        raise ValueError("ball masses must come from a probability measure")
    return _table(schedule, taus, masses, censored | unresolved, unresolved)


def entry_table_cylinder(
    codes: np.ndarray, target: np.ndarray, state: GibbsState, max_depth: int, horizon: int
) -> EntryTable:
    """Cylinder mode: E_n = tau_{[rho|_n]}(x) mu([rho|_n]) for n = 1..max_depth, with exact Gibbs masses."""
    lengths = match_lengths(codes, target, 1, horizon + 1, max_depth)
    running = np.maximum.accumulate(lengths)
    depths = np.arange(1, max_depth + 1)
    first = np.searchsorted(running, depths, side="left")
    censored = first >= running.size
    taus = np.where(censored, 0, first + 1).astype(np.int64)
    masses = np.array([state.cylinder(tuple(int(s) for s in target[:n])) for n in depths])
    radii = np.exp(-depths.astype(float))
    return _table(radii, taus, masses, censored, np.zeros(max_depth, dtype=bool), depths)


@dataclass(frozen=True)
class RateEstimates:
    hitting: float
    hitting_lower: float
    hitting_upper: float
    dimension: float
    dimension_lower: float
    dimension_upper: float
    n_records: int


def _slopes(x: np.ndarray, y: np.ndarray, window: int) -> tuple[float, float, float]:
    overall = float(linregress(x, y).slope)
    local = [float(linregress(x[i : i + window], y[i : i + window]).slope) for i in range(x.size - window + 1)]
    return overall, min(local), max(local)


def rate_estimates(records: HittingRecords, mass: Callable[[float], float], window: Optional[int] = None) -> RateEstimates:
    """Hitting rate (log tau against -log r) and pointwise dimension (log mu(B) against log r)."""
    positive = records.positive
    if len(positive) < 10:
        raise ValueError(f"need at least 10 records with r > 0, got {len(positive)}")
    log_r = np.log(positive.radii)
    masses = np.array([mass(float(r)) for r in positive.radii])
    if (masses <= 0).any():
        raise DegenerateMeasureError("a record ball has zero mass")
    window = window or max(5, len(positive) // 2)
    hitting = _slopes(-log_r, np.log(positive.times.astype(float)), window)
    dimension = _slopes(log_r, np.log(masses), window)
    return RateEstimates(*hitting, *dimension, len(positive))


@dataclass(frozen=True)
class PairScan:
    pair_id: int
    records: HittingRecords
    masses: np.ndarray
    statistics: np.ndarray
    maxima: tuple[float, ...]
    minima: tuple[float, ...]
    degenerate: bool

    @property
    def monotone(self) -> bool:
        finite = [m for m in self.maxima if not math.isnan(m)]
        return all(a <= b for a, b in zip(finite, finite[1:]))

    def entry_rows(self) -> list[list]:
        running = np.maximum.accumulate(self.statistics) if self.statistics.size else self.statistics
        positive = self.records.positive
        return [
            [self.pair_id, float(r), int(n), float(m), float(e), float(mx)]
            for r, n, m, e, mx in zip(positive.radii, positive.times, self.masses, self.statistics, running)
        ]


def scan_pair(
    adapter: SystemAdapter, pair_id: int, seed: int, horizons: Sequence[int], diagonal: bool = False
) -> PairScan:
    """Running max of n_k mu(B(y, r_k)) and min over k >= 3, at each horizon, for one sampled pair."""
    rng = seed_stream(seed, pair_id)
    horizon = max(horizons)
    orbit = adapter.sample_orbit(rng, horizon + 1)
    target = adapter.target_of(orbit) if diagonal else adapter.sample_target(rng)
    records = record_sequence(adapter, orbit, target, horizon)
    positive = records.positive
    masses = np.array([adapter.ball_mass(target, float(r)) for r in positive.radii])
    # atomless guard: exact hits and zero-mass balls carry no statistic
    keep = masses > 0
    degenerate = records.terminal or not keep.all() or not keep.any()
    statistics = positive.times[keep] * masses[keep]
    times = positive.times[keep]
    maxima, minima = [], []
    for h in horizons:
        inside = statistics[times <= h]
        maxima.append(float(inside.max()) if inside.size else math.nan)
        minima.append(float(inside[2:].min()) if inside.size >= 3 else math.nan)
    trimmed = HittingRecords(times, positive.radii[keep], records.horizon, records.terminal)
    return PairScan(pair_id, trimmed, masses[keep], statistics, tuple(maxima), tuple(minima), degenerate)


def _scan_task(payload: tuple) -> PairScan:
    return scan_pair(*payload)


@dataclass(frozen=True)
class DivergenceScan:
    horizons: tuple[int, ...]
    pairs: tuple[PairScan, ...]
    median_max: tuple[float, ...]
    median_min: tuple[float, ...]
    excluded: int

    @property
    def trend(self) -> bool:
        """Medians of the running max strictly increase across horizons."""
        return all(a < b for a, b in zip(self.median_max, self.median_max[1:]))

    @property
    def monotone_fraction(self) -> float:
        kept = [p for p in self.pairs if not p.degenerate]
        return sum(p.monotone for p in kept) / len(kept) if kept else math.nan


def divergence_scan(
    adapter: SystemAdapter,
    n_pairs: int,
    horizons: Sequence[int],
    seed: int,
    workers: int = 1,
    diagonal: bool = False,
    progress: Optional[Callable[[int], None]] = None,
) -> DivergenceScan:
    horizons = tuple(int(h) for h in horizons)
    if not horizons or any(a >= b for a, b in zip(horizons, horizons[1:])):
        raise ValueError("horizons must be strictly increasing")
    payloads = [(adapter, i, seed, horizons, diagonal) for i in range(n_pairs)]
    pairs = tuple(run_tasks(_scan_task, payloads, workers, progress=progress))
    kept = [p for p in pairs if not p.degenerate]
    if not kept:
        raise DegenerateMeasureError("every pair was excluded by the atomless guard")
    median_max = tuple(float(np.nanmedian([p.maxima[i] for p in kept])) for i in range(len(horizons)))
    median_min = tuple(float(np.nanmedian([p.minima[i] for p in kept])) for i in range(len(horizons)))
    return DivergenceScan(horizons, pairs, median_max, median_min, len(pairs) - len(kept))


@dataclass(frozen=True)
class WaitingTail:
    r: float
    k_grid: np.ndarray
    ball_mass: float
    cover_mass: float
    a: np.ndarray
    q: np.ndarray
    a_stderr: np.ndarray
    q_stderr: np.ndarray
    n_samples: int
    independence: np.ndarray
    exact: Optional[np.ndarray]
    window_z: float

    @property
    def bound_holds(self) -> bool:
        """q <= k mu(R) + 3 sigma on every grid point."""
        return bool(np.all(self.q <= self.k_grid * self.cover_mass + 3 * self.q_stderr + 1e-15))

    @property
    def ordered(self) -> bool:
        joint = np.sqrt(self.a_stderr**2 + self.q_stderr**2)
        return bool(np.all(self.a <= self.q + 2 * joint + 1e-15))

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.a) >= 0) and np.all(np.diff(self.q) >= 0))

    def z_scores(self, reference: np.ndarray) -> np.ndarray:
        spread = np.sqrt(np.maximum(reference * (1 - reference), 1e-12) / self.n_samples)
        return np.abs(self.a - reference) / spread


def waiting_tail(
    adapter: SystemAdapter,
    target: Target,
    r: float,
    k_grid: Sequence[int],
    n_samples: int,
    seed: int,
    chunk: int = 5_000,
) -> WaitingTail:
    """Monte Carlo a_r^(k) = mu(tau_B <= k) and q_r^(k) = mu(tau_R <= k) over a grid of k."""
    grid = np.asarray(sorted(set(int(k) for k in k_grid)), dtype=np.int64)
    if grid.size == 0 or grid[0] < 0:
        raise ValueError("k grid must be non-empty and non-negative")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    top = int(grid[-1])
    cover = adapter.cover(target, r)
    mu_ball = adapter.ball_mass(target, r)
    tau_ball = np.empty(n_samples, dtype=np.int64)
    tau_cover = np.empty(n_samples, dtype=np.int64)
    visits = np.zeros(top + 1)
    rng = seed_stream(seed, 0)
    for start in range(0, n_samples, chunk):
        rows = min(chunk, n_samples - start)
        orbits = adapter.sample_orbits(rng, rows, top + 1)
        in_ball = adapter.distances(orbits, target) < r
        in_cover = adapter.in_cover(orbits, target, cover)
        tau_ball[start : start + rows] = _first_entry(in_ball, top)
        tau_cover[start : start + rows] = _first_entry(in_cover, top)
        visits += in_ball.sum(axis=0)
    a = np.array([(tau_ball <= k).mean() for k in grid])
    q = np.array([(tau_cover <= k).mean() for k in grid])
    frequency = visits[1:] / n_samples
    spread = math.sqrt(max(mu_ball * (1 - mu_ball), 1e-12) / n_samples)
    window_z = float(np.max(np.abs(frequency - mu_ball)) / spread) if top else 0.0
    exact = adapter.exact_entry(target, r, top) if top else None
    exact_cdf = np.array([exact[:k].sum() for k in grid]) if exact is not None else None
    return WaitingTail(
        r=r,
        k_grid=grid,
        ball_mass=mu_ball,
        cover_mass=cover.mass,
        a=a,
        q=q,
        a_stderr=np.sqrt(a * (1 - a) / n_samples),
        q_stderr=np.sqrt(q * (1 - q) / n_samples),
        n_samples=n_samples,
        independence=1 - (1 - mu_ball) ** grid,
        exact=exact_cdf,
        window_z=window_z,
    )


def _first_entry(inside: np.ndarray, top: int) -> np.ndarray:
    """First index n >= 1 of each row inside the set; top + 1 when there is none."""
    tail = inside[:, 1 : top + 1]
    hit = tail.any(axis=1)
    return np.where(hit, tail.argmax(axis=1) + 1, top + 1)


@dataclass(frozen=True)
class LadderRung:
    r: float
    k: float
    cover_mass: float
    ball_mass: float
    growth_slack: float
    mass_slack: float


@dataclass(frozen=True)
class DivergenceCertificate:
    M: float
    fit: MixingFit
    Gamma: float
    s: int
    W: float
    delta: float
    omega: int
    ladder: tuple[LadderRung, ...]
    estimate: float
    stderr: float
    n_samples: int

    @property
    def verdict(self) -> bool:
        return self.estimate <= self.delta + 3 * self.stderr

    def rows(self) -> list[list]:
        return [
            [i, rung.r, rung.k, rung.cover_mass, rung.ball_mass, _blank(rung.growth_slack), _blank(rung.mass_slack)]
            for i, rung in enumerate(self.ladder)
        ]


def _blank(value: float) -> Union[str, float]:
    return "" if math.isnan(value) else float(value)


def gamma_of(M: float, C: float) -> float:
    """Gamma(M) = 1 - exp(-4 M C)."""
    return 1.0 - math.exp(-4.0 * M * C)


def gap_for(Gamma: float, D: float, gamma: float, limit: int = 1_000_000) -> int:
    """The least s >= 1 with Gamma (1 + D gamma^s) < 1."""
    for s in range(1, limit + 1):
        if Gamma * (1 + D * gamma**s) < 1:
            return s
    raise LadderInfeasibleError(0, "Gamma * (1 + D gamma^s) < 1")


def stage_count(WGamma: float, delta: float) -> int:
    """Omega: the least integer >= 0 with (W Gamma)^(Omega + 1) <= delta / 2."""
    if not 0 < WGamma < 1:
        raise LadderInfeasibleError(0, "W * Gamma < 1")
    if not 0 < delta < 2:
        raise ValueError(f"delta must lie in (0, 2), got {delta}")
    omega = max(0, math.ceil(math.log(delta / 2) / math.log(WGamma)) - 1)
    while WGamma ** (omega + 1) > delta / 2:
        omega += 1
    while omega > 0 and WGamma**omega <= delta / 2:
        omega -= 1
    return omega


def fit_mixing(adapter: SystemAdapter, max_gap: int = 30) -> MixingFit:
    if adapter.state is None:
        raise UnsupportedFamilyError(f"{adapter.name} has no symbolic Gibbs state to probe")
    return fit_mixing_constants(adapter.state, max_gap)


def _next_radius(
    adapter: SystemAdapter, target: Target, upper: float, bound: float, stage: int, constraint: str
) -> float:
    """The largest radius below ``upper`` (up to bisection precision) whose cover mass is <= bound."""
    lo, hi = adapter.resolution, upper
    if adapter.cover(target, lo).mass > bound:
        raise LadderInfeasibleError(stage, constraint)
    for _ in range(60):
        middle = math.sqrt(lo * hi)
        if adapter.cover(target, middle).mass <= bound:
            lo = middle
        else:
            hi = middle
        if hi / lo < 1 + 1e-9:
            break
    return lo


def build_certificate(
    adapter: SystemAdapter,
    M: float,
    delta: float,
    n_samples: int,
    seed: int,
    fit: Optional[MixingFit] = None,
    r0: Optional[float] = None,
    max_stages: int = 1_000,
    max_horizon: int = 10**7,
    chunk: int = 2_000,
) -> DivergenceCertificate:
    """Build the radius ladder of the divergence argument and estimate mu(cap_i A_{r_i}^c).

    A_r = {tau_{B_r} > M / mu(B_r)}. The ladder starts at r0 and picks each next radius
    as large as both k_{i+1} >= 2 (s + k_i) and mu(R_{i+1}) <= delta / (2 Omega (k_i + s))
    allow, with k_i = 2 M / mu(R_{r_i}).
    """
    if M <= 0:
        raise ValueError("M must be positive")
    fit = fit or fit_mixing(adapter)
    Gamma = gamma_of(M, fit.C)
    s = gap_for(Gamma, fit.D, fit.gamma)
    W = 1 + fit.D * fit.gamma**s
    omega = stage_count(W * Gamma, delta)
    if omega > max_stages:
        raise LadderInfeasibleError(0, f"Omega = {omega} <= {max_stages}")
    logger.info("Gamma=%.6g s=%d W=%.6g Omega=%d", Gamma, s, W, omega)

    rng = seed_stream(seed, 0)
    target = adapter.sample_target(rng)
    radius = r0 or adapter.default_radius
    cover_mass = adapter.cover(target, radius).mass
    ladder = [LadderRung(radius, 2 * M / cover_mass, cover_mass, adapter.ball_mass(target, radius), math.nan, math.nan)]
    for stage in range(1, omega + 1):
        k = ladder[-1].k
        growth, budget = M / (s + k), delta / (2 * omega) / (k + s)
        constraint = (
            "k_{i+1} >= 2 (s + k_i)" if growth <= budget else "mu(R_{i+1}) <= delta / (2 Omega (k_i + s))"
        )
        radius = _next_radius(adapter, target, ladder[-1].r, min(growth, budget), stage, constraint)
        cover_mass = adapter.cover(target, radius).mass
        rung_k = 2 * M / cover_mass
        ladder.append(
            LadderRung(
                radius,
                rung_k,
                cover_mass,
                adapter.ball_mass(target, radius),
                rung_k - 2 * (s + k),
                budget - cover_mass,
            )
        )
    horizons = [int(math.floor(M / rung.ball_mass)) if rung.ball_mass > 0 else 0 for rung in ladder]
    if max(horizons) > max_horizon:
        raise LadderInfeasibleError(len(ladder) - 1, f"M / mu(B_r) <= {max_horizon}")

    top = max(horizons)
    bad = 0
    for start in range(0, n_samples, chunk):
        rows = min(chunk, n_samples - start)
        orbits = adapter.sample_orbits(rng, rows, top + 1)
        d = adapter.distances(orbits, target)
        hit_all = np.ones(rows, dtype=bool)
        for rung, h in zip(ladder, horizons):
            hit_all &= (d[:, 1 : h + 1] < rung.r).any(axis=1) if h else False
        bad += int(hit_all.sum())
    estimate = bad / n_samples
    stderr = math.sqrt(max(estimate * (1 - estimate), 0.0) / n_samples)
    return DivergenceCertificate(M, fit, Gamma, s, W, delta, omega, tuple(ladder), estimate, stderr, n_samples)
