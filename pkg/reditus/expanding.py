"""Distance expanding interval maps with Markov partitions.

Maps are piecewise increasing affine Markov maps on [0, 1) (doubling, ternary, a
two-branch golden-mean map) plus the Gauss map with its countable partition.
Cell endpoints are exact fractions; cells are right-open and itineraries at
endpoints resolve right-continuously.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol, Union

import numpy as np

from .errors import ResolutionError
from .symbolic import IncidenceStructure, Word
from .thermo import GibbsState

logger = logging.getLogger(__name__)

Number = Union[float, Fraction]

# below this radius r**2 falls under the double-precision spacing of points in [0, 1)
MIN_RESOLVED_RADIUS = math.sqrt(2.0**-52)


@dataclass(frozen=True)
class AffineBranch:
    """T(x) = image_lo + slope (x - lo) on the cell [lo, hi)."""

    lo: Fraction
    hi: Fraction
    image_lo: Fraction
    image_hi: Fraction

    @property
    def slope(self) -> Fraction:
        return (self.image_hi - self.image_lo) / (self.hi - self.lo)

    def apply(self, x: Number) -> Number:
        if isinstance(x, Fraction):
            return self.image_lo + self.slope * (x - self.lo)
        return float(self.image_lo) + float(self.slope) * (x - float(self.lo))

    def inverse(self, y: Number) -> Number:
        if isinstance(y, Fraction):
            return self.lo + (y - self.image_lo) / self.slope
        return float(self.lo) + (y - float(self.image_lo)) / float(self.slope)


class IntervalMap(Protocol):
    name: str
    expansion: float
    scale: float
    uniform: bool
    incidence: IncidenceStructure

    def symbol(self, x: Number) -> int: ...

    def apply(self, x: Number) -> Number: ...

    def inverse(self, symbol: int, y: Number) -> Number: ...

    def inverse_array(self, symbols: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def derivative(self, x: float) -> float: ...

    def cell_interval(self, word: Word) -> tuple[Fraction, Fraction]: ...


@dataclass(frozen=True, eq=False)
class AffineMarkovMap:
    """Increasing affine Markov branches; cells listed left to right and covering [0, 1)."""

    name: str
    branches: tuple[AffineBranch, ...]
    circle: bool = False
    uniform: bool = True
    incidence: IncidenceStructure = field(init=False)

    def __post_init__(self) -> None:
        los = [b.lo for b in self.branches]
        if los[0] != 0 or self.branches[-1].hi != 1:
            raise ValueError("branch cells must cover [0, 1)")
        if any(a.hi != b.lo for a, b in zip(self.branches, self.branches[1:])):
            raise ValueError("branch cells must be contiguous and sorted")
        if any(b.slope <= 1 for b in self.branches):
            raise ValueError("every branch must be increasing with slope > 1")
        rows = [
            [1 if branch.image_lo <= cell.lo and cell.hi <= branch.image_hi else 0 for cell in self.branches]
            for branch in self.branches
        ]
        object.__setattr__(self, "incidence", IncidenceStructure(np.array(rows)))
        object.__setattr__(self, "_lo", np.array([float(b.lo) for b in self.branches]))
        object.__setattr__(self, "_image_lo", np.array([float(b.image_lo) for b in self.branches]))
        object.__setattr__(self, "_slope", np.array([float(b.slope) for b in self.branches]))

    @property
    def expansion(self) -> float:
        return float(min(b.slope for b in self.branches))

    @property
    def scale(self) -> float:
        """delta: the mesh of the partition."""
        return float(max(b.hi - b.lo for b in self.branches))

    def symbol(self, x: Number) -> int:
        for i in range(len(self.branches) - 1, -1, -1):
            if self.branches[i].lo <= x:
                return i
        raise ValueError(f"point {x} outside [0, 1)")

    def apply(self, x: Number) -> Number:
        return self.branches[self.symbol(x)].apply(x)

    def inverse(self, symbol: int, y: Number) -> Number:
        return self.branches[symbol].inverse(y)

    def inverse_array(self, symbols: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self._lo[symbols] + (y - self._image_lo[symbols]) / self._slope[symbols]

    def derivative(self, x: float) -> float:
        return float(self.branches[self.symbol(x)].slope)

    def cell_interval(self, word: Word) -> tuple[Fraction, Fraction]:
        """The cell of R^n coded by ``word``, pulled back through the inverse branches."""
        if not word:
            return Fraction(0), Fraction(1)
        lo, hi = self.branches[word[-1]].lo, self.branches[word[-1]].hi
        for symbol in reversed(word[:-1]):
            lo, hi = self.branches[symbol].inverse(lo), self.branches[symbol].inverse(hi)
        return lo, hi

    def check_markov_property(self) -> bool:
        """Every branch image is a union of cells."""
        endpoints = {b.lo for b in self.branches} | {Fraction(1)}
        return all(b.image_lo in endpoints and b.image_hi in endpoints for b in self.branches)


@dataclass(frozen=True, eq=False)
class GaussMap:
    """x -> {1/x}; symbol k codes the digit k + 1 and the cell [1/(k+2), 1/(k+1)).

    The coding alphabet is truncated at ``truncation`` digits. The expansion is not
    uniform (T' tends to 1 at x = 1), which ``uniform`` flags.
    """

    truncation: int = 64
    name: str = "gauss"
    circle: bool = False
    uniform: bool = False
    expansion: float = 1.0
    scale: float = 0.5

    @property
    def incidence(self) -> IncidenceStructure:
        return IncidenceStructure.full(self.truncation, truncated=True)

    def symbol(self, x: Number) -> int:
        if x <= 0:
            raise ValueError("0 has no continued-fraction digit")
        return math.floor(1 / x) - 1 if isinstance(x, Fraction) else int(1.0 // x) - 1

    def apply(self, x: Number) -> Number:
        if x == 0:
            return x
        inverse = 1 / x
        return inverse - math.floor(inverse)

    def inverse(self, symbol: int, y: Number) -> Number:
        return 1 / (symbol + 1 + y)

    def inverse_array(self, symbols: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 1.0 / (symbols + 1.0 + y)

    def derivative(self, x: float) -> float:
        return 1.0 / (x * x)

    def cell_interval(self, word: Word) -> tuple[Fraction, Fraction]:
        ends = []
        for tail in (Fraction(0), Fraction(1)):
            x = tail
            for symbol in reversed(word):
                x = 1 / (symbol + 1 + x)
            ends.append(x)
        return min(ends), max(ends)


def _branches(table: list[list[Union[str, int, float]]]) -> tuple[AffineBranch, ...]:
    return tuple(AffineBranch(*(Fraction(str(v)) for v in row)) for row in table)


BUILTIN_MAPS = ("doubling", "ternary", "markov2", "gauss")


def make_map(name: str, params: Optional[dict] = None) -> Union[AffineMarkovMap, GaussMap]:
    """Build a built-in interval map by name."""
    params = params or {}
    circle = bool(params.get("circle", False))
    if name == "doubling":
        return AffineMarkovMap("doubling", _branches([[0, "1/2", 0, 1], ["1/2", 1, 0, 1]]), circle=circle)
    if name == "ternary":
        table = [[0, "1/3", 0, 1], ["1/3", "2/3", 0, 1], ["2/3", 1, 0, 1]]
        return AffineMarkovMap("ternary", _branches(table), circle=circle)
    if name == "markov2":
        table = params.get("table", [[0, "2/3", 0, 1], ["2/3", 1, 0, "2/3"]])
        return AffineMarkovMap("markov2", _branches(table))
    if name == "gauss":
        return GaussMap(truncation=int(params.get("truncation", 64)))
    raise ValueError(f"unknown map '{name}'")


@dataclass(frozen=True)
class IterateResult:
    point: Number
    exact: bool
    drift_bound: float


def iterate(tmap: IntervalMap, x: Number, n: int) -> IterateResult:
    """T^n(x); exact for Fraction inputs, double precision with a drift bound otherwise."""
    if not 0 <= x < 1:
        raise ValueError(f"point {x} outside [0, 1)")
    if isinstance(x, Fraction):
        for _ in range(n):
            x = tmap.apply(x)
        return IterateResult(x, True, 0.0)
    drift = math.ulp(1.0)
    for _ in range(n):
        if x > 0:
            drift *= tmap.derivative(x)
        x = tmap.apply(x)
        drift += math.ulp(1.0)
    return IterateResult(x, False, min(drift, 1.0))


def itinerary(tmap: IntervalMap, x: Number, n: int) -> Word:
    symbols = []
    for _ in range(n):
        symbols.append(tmap.symbol(x))
        x = tmap.apply(x)
    return tuple(symbols)


def cell_of(tmap: IntervalMap, x: Number, n: int) -> tuple[Word, tuple[Fraction, Fraction]]:
    """The cell of R^n containing x, with its coding word."""
    word = itinerary(tmap, Fraction(x) if isinstance(x, float) else x, n)
    return word, tmap.cell_interval(word)


def cell_order(tmap: IntervalMap, point: Fraction, limit: int) -> int:
    """Least m >= 1 with ``point`` an endpoint of the order-m grid (capped at ``limit``)."""
    if point in (0, 1):
        return 1
    for m in range(1, limit + 1):
        if cell_of(tmap, point, m)[1][0] == point:
            return m
    return limit


@dataclass(frozen=True)
class InverseBranch:
    """T_x^{-n}: the composite inverse branch along the itinerary of x."""

    tmap: IntervalMap
    base: Number
    order: int
    word: Word

    def __call__(self, z: Number) -> Number:
        for symbol in reversed(self.word):
            z = self.tmap.inverse(symbol, z)
        return z

    @property
    def contraction(self) -> float:
        return self.tmap.expansion ** (-self.order) if self.tmap.uniform else 1.0


def inverse_branch(tmap: IntervalMap, x: Number, n: int) -> InverseBranch:
    return InverseBranch(tmap, x, n, itinerary(tmap, x, n))


@dataclass(frozen=True)
class ExpansionCheck:
    min_ratio: float
    expansion: float
    holds: bool
    uniform: bool


def check_expansion(tmap: IntervalMap, n_pairs: int, seed: int) -> ExpansionCheck:
    """|Tx - Ty| >= lambda |x - y| on sampled pairs in a common cell within distance delta."""
    rng = np.random.default_rng(seed)
    ratios = []
    for x in rng.uniform(1e-6, 1 - 1e-6, size=n_pairs):
        x = float(x)
        lo, hi = (float(v) for v in tmap.cell_interval((tmap.symbol(x),)))
        y = float(rng.uniform(lo, hi))
        if y == x or abs(x - y) > tmap.scale:
            continue
        ratios.append(abs(tmap.apply(x) - tmap.apply(y)) / abs(x - y))
    min_ratio = min(ratios) if ratios else math.inf
    holds = min_ratio >= tmap.expansion * (1 - 1e-9)
    if not tmap.uniform:
        logger.info("%s is not uniformly expanding; expansion check is informational", tmap.name)
    return ExpansionCheck(min_ratio, tmap.expansion, holds, tmap.uniform)


class IntervalMeasure(Protocol):
    def interval_mass(self, a: Number, b: Number) -> float: ...


@dataclass(frozen=True)
class LebesgueMeasure:
    def interval_mass(self, a: Number, b: Number) -> float:
        return max(float(min(b, 1)) - float(max(a, 0)), 0.0)


@dataclass(frozen=True)
class GaussMeasure:
    """dmu = dx / ((1 + x) ln 2)."""

    def interval_mass(self, a: Number, b: Number) -> float:
        a, b = float(max(a, 0)), float(min(b, 1))
        return max(math.log2((1 + b) / (1 + a)), 0.0) if b > a else 0.0


@dataclass(frozen=True, eq=False)
class CodedMeasure:
    """Push-forward of a symbolic Gibbs state through the itinerary coding of an affine map."""

    tmap: AffineMarkovMap
    state: GibbsState
    resolution: float = 1e-18
    max_depth: int = 200

    def __post_init__(self) -> None:
        if self.tmap.incidence != self.state.incidence:
            raise ValueError("the Gibbs state lives on a different incidence matrix than the map's coding")

    def cdf(self, x: Number) -> float:
        """mu([0, x))."""
        if x <= 0:
            return 0.0
        if x >= 1:
            return 1.0
        point = Fraction(x)
        total, mass, previous = 0.0, 1.0, None
        for _ in range(self.max_depth):
            symbol = self.tmap.symbol(point)
            weights = self.state.stationary if previous is None else self.state.kernel[previous]
            total += mass * float(weights[:symbol].sum())
            mass *= float(weights[symbol])
            point = self.tmap.apply(point)
            previous = symbol
            if mass < self.resolution or point == 0:
                break
        return total

    def interval_mass(self, a: Number, b: Number) -> float:
        return max(self.cdf(b) - self.cdf(a), 0.0)


def ball_mass(measure: IntervalMeasure, y: Number, r: Number, circle: bool = False) -> float:
    """mu(B(y, r)) for the Euclidean metric (one-sided at the boundary) or the circle metric."""
    if not circle:
        return measure.interval_mass(y - r, y + r)
    if r >= 0.5:
        return 1.0
    mass = measure.interval_mass(max(y - r, 0), min(y + r, 1))
    if y - r < 0:
        mass += measure.interval_mass(1 + (y - r), 1)
    if y + r > 1:
        mass += measure.interval_mass(0, y + r - 1)
    return mass


def distance(x: np.ndarray, y: float, circle: bool = False) -> np.ndarray:
    gap = np.abs(np.asarray(x, dtype=float) - y)
    return np.minimum(gap, 1.0 - gap) if circle else gap


def cover_depth(tmap: IntervalMap, r: float) -> int:
    """n(r): the least n with delta lambda^{-(n-1)} <= r^2."""
    delta, lam = tmap.scale, tmap.expansion
    n = max(1, 1 + math.ceil(math.log(delta / (r * r)) / math.log(lam)))
    while n > 1 and delta * lam ** (-(n - 2)) <= r * r:
        n -= 1
    while delta * lam ** (-(n - 1)) > r * r:
        n += 1
    return n


@dataclass(frozen=True)
class MarkovCover:
    y: Number
    r: float
    depth: int
    lo: Fraction
    hi: Fraction
    order: int
    mass: float
    ball_mass: float
    contains_ball: bool
    inside_enlarged_ball: bool

    @property
    def ratio(self) -> float:
        return self.mass / self.ball_mass if self.ball_mass > 0 else math.inf


def markov_cover(tmap: AffineMarkovMap, measure: IntervalMeasure, y: Number, r: float) -> MarkovCover:
    """R_r: the union of order-n(r) cells meeting the open ball B(y, r)."""
    if not 0 < r < 1:
        raise ValueError(f"radius must lie in (0, 1), got {r}")
    if r < MIN_RESOLVED_RADIUS:
        raise ResolutionError(r, MIN_RESOLVED_RADIUS)
    n = cover_depth(tmap, r)
    center, radius = Fraction(y), Fraction(r)
    left, right = center - radius, center + radius
    lo = Fraction(0) if left <= 0 else cell_of(tmap, left, n)[1][0]
    if right >= 1:
        hi = Fraction(1)
    else:
        cell_lo, cell_hi = cell_of(tmap, right, n)[1]
        # the ball is open, so a cell starting exactly at y + r is not needed
        hi = right if cell_lo == right else cell_hi
    order = max(cell_order(tmap, lo, n), cell_order(tmap, hi, n))
    enlarged = radius + radius * radius
    return MarkovCover(
        y=y,
        r=r,
        depth=n,
        lo=lo,
        hi=hi,
        order=order,
        mass=measure.interval_mass(lo, hi),
        ball_mass=ball_mass(measure, y, r),
        contains_ball=lo <= max(left, 0) and hi >= min(right, 1),
        inside_enlarged_ball=lo >= center - enlarged and hi <= center + enlarged,
    )


@dataclass(frozen=True)
class GoodRadiusProbe:
    radii: np.ndarray
    ratios: np.ndarray
    flags: np.ndarray
    density: float
    per_decade: dict[int, float]


def good_radius_density(
    measure: IntervalMeasure, y: float, r_min: float, r_max: float, grid_size: int, circle: bool = False
) -> GoodRadiusProbe:
    """Fraction of radii on a geometric grid with mu(B(y, r + r^2)) / mu(B(y, r)) <= 2."""
    if grid_size < 100:
        raise ValueError("grid_size must be at least 100")
    radii = np.geomspace(r_min, r_max, grid_size)
    ratios = np.array(
        [ball_mass(measure, y, r + r * r, circle) / max(ball_mass(measure, y, r, circle), 1e-300) for r in radii]
    )
    flags = ratios <= 2.0
    decades = np.floor(np.log10(radii)).astype(int)
    per_decade = {int(d): float(flags[decades == d].mean()) for d in np.unique(decades)}
    return GoodRadiusProbe(radii, ratios, flags, float(flags.mean()), per_decade)


def itinerary_window(tmap: IntervalMap) -> int:
    """Symbols needed so that the composed inverse branches pin a point to double precision."""
    if not tmap.uniform:
        return 40
    return math.ceil(53 * math.log(2) / math.log(tmap.expansion)) + 1


def orbit_from_itinerary(tmap: IntervalMap, codes: np.ndarray, length: int, chunk: int = 1 << 20) -> np.ndarray:
    """Points x_0 .. x_{length-1} of the orbit coded by ``codes``.

    Each x_n is rebuilt from the window codes[n : n + w] by composing inverse branches
    backwards from the midpoint, so float drift never accumulates along the orbit.
    ``codes`` must hold at least ``length + w`` symbols along its last axis; a 2-D
    batch of codes gives one orbit per row.
    """
    window = itinerary_window(tmap)
    if codes.shape[-1] < length + window:
        raise ValueError(f"need {length + window} symbols, got {codes.shape[-1]}")
    points = np.empty((*codes.shape[:-1], length))
    rows = max(1, int(np.prod(codes.shape[:-1])))
    step = max(1, chunk // rows)
    for start in range(0, length, step):
        stop = min(start + step, length)
        values = np.full((*codes.shape[:-1], stop - start), 0.5)
        for j in range(window - 1, -1, -1):
            values = tmap.inverse_array(codes[..., start + j : stop + j], values)
        points[..., start:stop] = values
    return points
