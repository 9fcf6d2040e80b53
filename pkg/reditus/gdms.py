"""Graph directed Markov systems on the line.

Every edge map is a real Moebius map x -> (a x + b) / (c x + d) with exact rational
coefficients (affine maps have c = 0). Points of the limit set always travel with
their codes; the coding map is never inverted numerically.
"""

import heapq
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional, Union

import numpy as np
from scipy import linalg
from scipy.interpolate import BarycentricInterpolator
from scipy.stats import linregress

from .errors import (
    BudgetExceededError,
    CodeExhaustedError,
    DegenerateMeasureError,
    InadmissibleWordError,
    SummabilityError,
    UnsupportedFamilyError,
)
from .symbolic import IncidenceStructure, Word, check_admissible

logger = logging.getLogger(__name__)

Number = Union[float, Fraction]
FAMILIES = ("affine", "mobius")


@dataclass(frozen=True)
class Mobius:
    a: Fraction
    b: Fraction
    c: Fraction
    d: Fraction

    @classmethod
    def affine(cls, scale: Number, shift: Number) -> "Mobius":
        return cls(Fraction(scale), Fraction(shift), Fraction(0), Fraction(1))

    @property
    def is_affine(self) -> bool:
        return self.c == 0

    def __call__(self, x: Number) -> Number:
        if isinstance(x, Fraction):
            return (self.a * x + self.b) / (self.c * x + self.d)
        return (float(self.a) * x + float(self.b)) / (float(self.c) * x + float(self.d))

    def derivative(self, x: Number) -> float:
        det = float(self.a * self.d - self.b * self.c)
        return det / (float(self.c) * float(x) + float(self.d)) ** 2

    def compose(self, inner: "Mobius") -> "Mobius":
        """self o inner, by the matrix product."""
        return Mobius(
            self.a * inner.a + self.b * inner.c,
            self.a * inner.b + self.b * inner.d,
            self.c * inner.a + self.d * inner.c,
            self.c * inner.b + self.d * inner.d,
        )

    def inverse(self) -> "Mobius":
        """The inverse map, by the adjugate matrix."""
        return Mobius(self.d, -self.b, -self.c, self.a)

    def image(self, lo: Number, hi: Number) -> tuple[Number, Number]:
        """Image of [lo, hi]; the map is monotone there since the pole lies outside."""
        left, right = self(lo), self(hi)
        return (left, right) if left <= right else (right, left)

    def fixed_point(self, lo: Number, hi: Number) -> Number:
        """The fixed point in [lo, hi]: a root of c x^2 + (d - a) x - b = 0."""
        if self.c == 0:
            if self.d == self.a:
                raise ValueError("affine map with unit slope has no unique fixed point")
            return self.b / (self.d - self.a)
        qa, qb, qc = float(self.c), float(self.d - self.a), float(-self.b)
        disc = math.sqrt(qb * qb - 4 * qa * qc)
        roots = [(-qb + disc) / (2 * qa), (-qb - disc) / (2 * qa)]
        inside = [x for x in roots if float(lo) - 1e-14 <= x <= float(hi) + 1e-14]
        if not inside:
            raise ValueError("no fixed point inside the seed interval")
        x = inside[0]
        # polish with the contraction itself
        for _ in range(4):
            x = self(x)
        return x


@dataclass(frozen=True, eq=False)
class GDMS:
    """A directed multigraph (V, E, i, t) with an incidence matrix and one contraction per edge.

    ``level`` is the word length at which the contraction constant ``s`` applies
    (the continued-fraction maps only contract after two steps).
    """

    name: str
    vertices: tuple[str, ...]
    initial: tuple[int, ...]
    terminal: tuple[int, ...]
    maps: tuple[Mobius, ...]
    seeds: tuple[tuple[Fraction, Fraction], ...]
    incidence: IncidenceStructure
    contraction: float
    family: str
    distortion: float = 1.0
    level: int = 1
    truncated: bool = False
    tail_mass: float = 0.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(f"unsupported map family '{self.family}'")
        if not 0 < self.contraction < 1:
            raise ValueError(f"contraction constant must lie in (0, 1), got {self.contraction}")
        n_edges = len(self.maps)
        if not len(self.initial) == len(self.terminal) == n_edges == self.incidence.alphabet_size:
            raise ValueError("edge data and incidence matrix disagree on the number of edges")
        if self.incidence.complete:
            if len(set(self.initial) | set(self.terminal)) != 1:
                raise ValueError("a full incidence matrix needs a single vertex")
        else:
            rows, cols = np.nonzero(self.incidence.matrix)
            terminal, initial = np.array(self.terminal), np.array(self.initial)
            bad = np.flatnonzero(terminal[rows] != initial[cols])
            if bad.size:
                a, b = int(rows[bad[0]]), int(cols[bad[0]])
                raise ValueError(f"A[{a + 1},{b + 1}] = 1 but t({a + 1}) != i({b + 1})")
        coefficients = np.array([[float(m.a), float(m.b), float(m.c), float(m.d)] for m in self.maps])
        object.__setattr__(self, "_coefficients", coefficients)
        object.__setattr__(self, "seed_lo", np.array([float(self.seeds[v][0]) for v in self.terminal]))
        object.__setattr__(self, "seed_hi", np.array([float(self.seeds[v][1]) for v in self.terminal]))

    @property
    def coefficients(self) -> np.ndarray:
        """Float (a, b, c, d) per edge."""
        return self._coefficients  # type: ignore[attr-defined,no-any-return]

    @property
    def n_edges(self) -> int:
        return len(self.maps)

    @property
    def max_diameter(self) -> float:
        return float(max(hi - lo for lo, hi in self.seeds))

    def seed(self, edge: int) -> tuple[Fraction, Fraction]:
        """X_{t(e)}, the domain of phi_e."""
        return self.seeds[self.terminal[edge]]

    def word_map(self, word: Word) -> Mobius:
        result = Mobius(Fraction(1), Fraction(0), Fraction(0), Fraction(1))
        for edge in word:
            result = result.compose(self.maps[edge])
        return result

    def diameter_bound(self, n: int) -> float:
        """A-priori bound on diam phi_omega(X) for |omega| = n."""
        return self.max_diameter * self.contraction ** (max(n - 1, 0) // self.level)

    def apply_array(self, edges: np.ndarray, x: np.ndarray) -> np.ndarray:
        a, b, c, d = np.moveaxis(self.coefficients[edges], -1, 0)
        return (a * x + b) / (c * x + d)

    def log_derivative_array(self, edges: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log |phi_e'(x)|, by the chain rule formula for Moebius maps."""
        a, b, c, d = np.moveaxis(self.coefficients[edges], -1, 0)
        return np.log(np.abs(a * d - b * c)) - 2 * np.log(np.abs(c * x + d))

    def sup_derivatives(self) -> np.ndarray:
        """sup over X_{t(e)} of |phi_e'|, attained at an endpoint."""
        values = []
        for edge, m in enumerate(self.maps):
            lo, hi = self.seed(edge)
            values.append(max(abs(m.derivative(lo)), abs(m.derivative(hi))))
        return np.array(values)


def maximal_incidence(initial: Sequence[int], terminal: Sequence[int]) -> IncidenceStructure:
    """A_ab = 1 exactly when t(a) = i(b)."""
    return IncidenceStructure((np.array(terminal)[:, None] == np.array(initial)[None, :]).astype(np.int8))


def single_vertex(
    name: str, maps: Sequence[Mobius], seed: tuple[Number, Number], contraction: float, **kw: Any
) -> GDMS:
    n = len(maps)
    return GDMS(
        name=name,
        vertices=("X",),
        initial=(0,) * n,
        terminal=(0,) * n,
        maps=tuple(maps),
        seeds=((Fraction(seed[0]), Fraction(seed[1])),),
        incidence=IncidenceStructure.full(n, truncated=kw.get("truncated", False)),
        contraction=contraction,
        **kw,
    )


BUILTIN_SYSTEMS = ("cantor3", "interval2", "gauss-cf")


def make_gdms(name: str, params: Optional[dict] = None) -> GDMS:
    """Built-in systems: the middle-third Cantor IFS, the dyadic interval IFS, the continued-fraction system."""
    params = params or {}
    if name == "cantor3":
        third = Fraction(1, 3)
        maps = [Mobius.affine(third, 0), Mobius.affine(third, Fraction(2, 3))]
        return single_vertex("cantor3", maps, (0, 1), 1 / 3, family="affine")
    if name == "interval2":
        half = Fraction(1, 2)
        return single_vertex("interval2", [Mobius.affine(half, 0), Mobius.affine(half, half)], (0, 1), 0.5, family="affine")
    if name == "gauss-cf":
        n = int(params.get("truncation", 10_000))
        maps = [Mobius(Fraction(0), Fraction(1), Fraction(1), Fraction(k)) for k in range(1, n + 1)]
        return single_vertex(
            "gauss-cf", maps, (0, 1), 0.25, family="mobius", distortion=4.0, level=2, truncated=True, tail_mass=math.log2(1 + 1 / (n + 1))
        )
    if name == "custom":
        return gdms_from_config(params)
    raise ValueError(f"unknown system '{name}'")


def gdms_from_config(params: dict) -> GDMS:
    """A system described in config: vertices, seeds per vertex, edges (i, t, map, coefficients)."""
    vertices = tuple(str(v) for v in params["vertices"])
    index = {v: k for k, v in enumerate(vertices)}
    seeds = tuple((Fraction(str(lo)), Fraction(str(hi))) for lo, hi in (params["seeds"][v] for v in vertices))
    initial, terminal, maps = [], [], []
    family = "affine"
    for edge in params["edges"]:
        initial.append(index[str(edge["i"])])
        terminal.append(index[str(edge["t"])])
        coefficients = [Fraction(str(v)) for v in edge["coefficients"]]
        if edge.get("map", "affine") == "affine":
            maps.append(Mobius.affine(*coefficients))
        elif edge["map"] == "mobius":
            maps.append(Mobius(*coefficients))
            family = "mobius"
        else:
            raise UnsupportedFamilyError(f"unsupported map family '{edge['map']}'")
    incidence = (
        IncidenceStructure(np.array(params["incidence"])) if "incidence" in params else maximal_incidence(initial, terminal)
    )
    logger.warning("user-supplied system '%s': contraction and distortion are checked on samples only", params.get("name", "custom"))
    return GDMS(
        name=str(params.get("name", "custom")),
        vertices=vertices,
        initial=tuple(initial),
        terminal=tuple(terminal),
        maps=tuple(maps),
        seeds=seeds,
        incidence=incidence,
        contraction=float(params["contraction"]),
        family=family,
        level=int(params.get("level", 1)),
    )


@dataclass(frozen=True)
class ContractionCheck:
    sup_derivative: float
    contraction: float
    holds: bool


def check_contraction(system: GDMS, sample_edges: int = 32) -> ContractionCheck:
    """Lip(phi_omega) <= s for words of length ``level`` (exact endpoint bound per word)."""
    edges = range(min(system.n_edges, sample_edges))
    worst = 0.0
    words = [(e,) for e in edges] if system.level == 1 else [(a, b) for a in edges for b in edges]
    for word in words:
        if not system.incidence.allows(word[0], word[-1]) and len(word) > 1:
            continue
        m = system.word_map(word)
        lo, hi = system.seed(word[-1])
        worst = max(worst, abs(m.derivative(lo)), abs(m.derivative(hi)))
    return ContractionCheck(worst, system.contraction, worst <= system.contraction * (1 + 1e-12))


@dataclass(frozen=True)
class ProjectionResult:
    point: Number
    lo: Number
    hi: Number
    radius: float
    bound: float


def project(system: GDMS, omega: Word) -> ProjectionResult:
    """The image interval phi_omega(X_{t(omega_n)}), its midpoint and error radii."""
    check_admissible(system.incidence, omega)
    if not omega:
        raise ValueError("projection needs a non-empty word")
    lo, hi = system.word_map(omega).image(*system.seed(omega[-1]))
    radius = float(hi - lo) / 2
    return ProjectionResult((lo + hi) / 2, lo, hi, radius, system.max_diameter * system.contraction ** (len(omega) // system.level))


def project_periodic(system: GDMS, prefix: Word, period: Word) -> Number:
    """pi(prefix period period ...), exactly: the fixed point of phi_period pushed through phi_prefix."""
    if not period:
        raise ValueError("period must be non-empty")
    check_admissible(system.incidence, (*prefix, *period, period[0]))
    cycle = system.word_map(period)
    x = cycle.fixed_point(*system.seed(period[-1]))
    return system.word_map(prefix)(x) if prefix else x


@dataclass(frozen=True)
class SOSCResult:
    osc: bool
    sosc: bool
    overlap: Optional[tuple[int, int]] = None
    witness_code: Optional[Word] = None
    witness_point: Optional[Number] = None


def check_sosc(system: GDMS, max_period: int = 3) -> SOSCResult:
    """OSC by exact interior-disjointness of first-level images; SOSC by a limit point in Int X."""
    if system.family not in FAMILIES:
        raise UnsupportedFamilyError(f"no exact interval images for family '{system.family}'")
    overlap = None
    for vertex in range(len(system.vertices)):
        edges = [e for e in range(system.n_edges) if system.initial[e] == vertex]
        images = sorted((system.maps[e].image(*system.seed(e)), e) for e in edges)
        for (first, e1), (second, e2) in zip(images, images[1:]):
            if first[1] > second[0]:
                overlap = (e1, e2)
                break
        if overlap:
            break
    if overlap:
        return SOSCResult(False, False, overlap=overlap)
    candidates = min(system.n_edges, 16)
    for length in range(1, max_period + 1):
        for period in np.ndindex(*(candidates,) * length):
            code = tuple(int(s) for s in period)
            try:
                x = project_periodic(system, (), code)
            except (InadmissibleWordError, ValueError):
                continue
            lo, hi = system.seeds[system.initial[code[0]]]
            if lo < x < hi:
                return SOSCResult(True, True, witness_code=code, witness_point=x)
    return SOSCResult(True, False)


@dataclass(frozen=True)
class CodedPoint:
    """A point of the limit set carried with its code: ``code`` then ``period`` repeated.

    An empty ``period`` means only the finite prefix ``code`` is known.
    """

    code: Word
    period: Word = ()

    def point(self, system: GDMS) -> Number:
        if self.period:
            return project_periodic(system, self.code, self.period)
        return project(system, self.code).point


def induced_map_apply(system: GDMS, z: CodedPoint) -> CodedPoint:
    """T_S(z) = pi(sigma omega) for z = pi(omega)."""
    if z.code:
        if not z.period and len(z.code) < 2:
            raise CodeExhaustedError(f"code {z.code} is too short to shift")
        return CodedPoint(z.code[1:], z.period)
    if not z.period:
        raise CodeExhaustedError("empty code")
    return CodedPoint((), (*z.period[1:], z.period[0]))


@dataclass(frozen=True)
class EdgePotential:
    """f(e, x) = t log|phi_e'(x)| + weight_e, with t >= 0."""

    t: float = 0.0
    weights: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError("the geometric exponent t must be non-negative")

    def values(self, system: GDMS, edges: np.ndarray, x: np.ndarray) -> np.ndarray:
        edges, x = np.broadcast_arrays(edges, x)
        result = self.t * system.log_derivative_array(edges, x) if self.t else np.zeros(x.shape)
        if self.weights is not None:
            result = result + np.asarray(self.weights)[edges]
        return result

    def sup_exp(self, system: GDMS) -> np.ndarray:
        """sup_x exp(f(e, x)) per edge."""
        result = system.sup_derivatives() ** self.t
        if self.weights is not None:
            result = result * np.exp(self.weights)
        return result


def bernoulli_potential(p: Sequence[float]) -> EdgePotential:
    return EdgePotential(0.0, tuple(math.log(v) for v in p))


def _chebyshev_nodes(lo: float, hi: float, m: int) -> np.ndarray:
    return (lo + hi) / 2 + (hi - lo) / 2 * np.cos(np.pi * np.arange(m) / (m - 1))


@dataclass(frozen=True, eq=False)
class LimitMeasure:
    """The projected Gibbs state of an edge potential on the limit set.

    The transfer operator L g(x) = sum_e exp(f(e, x)) g(phi_e x) is collocated at
    Chebyshev nodes on every seed interval. Its Perron eigenvalue is exp(P(f)), the
    right eigenvector is the density h and the left eigenvector is a quadrature
    rule for the conformal measure.
    """

    system: GDMS
    potential: EdgePotential
    nodes: tuple[np.ndarray, ...]
    eigenvalue: float
    density: tuple[BarycentricInterpolator, ...]
    weights: tuple[np.ndarray, ...]
    density_max: float
    entropy: float = 0.0
    lyapunov: float = 0.0
    mean_potential: float = 0.0

    @property
    def pressure(self) -> float:
        return math.log(self.eigenvalue)

    @property
    def alpha_theory(self) -> float:
        """(1/2) h / chi, the floor for the local power-law exponent."""
        return 0.5 * self.entropy / self.lyapunov

    def h(self, vertex: int, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.density[vertex](np.asarray(x, dtype=float)), dtype=float)

    def _pull_back(self, word: Word, edges: np.ndarray, x: np.ndarray) -> np.ndarray:
        """exp(S f) h(phi x) for the words ``word + (e,)``, at points x of X_{t(e)}."""
        log_weight = self.potential.values(self.system, edges, x)
        x = self.system.apply_array(edges, x)
        for edge in reversed(word):
            step = np.full(x.shape, edge)
            log_weight = log_weight + self.potential.values(self.system, step, x)
            x = self.system.apply_array(step, x)
        start = np.asarray(self.system.initial)[word[0]] if word else np.asarray(self.system.initial)[edges]
        start = np.broadcast_to(start, x.shape)
        h = np.empty(x.shape)
        for vertex in np.unique(start):
            mask = start == vertex
            h[mask] = self.h(int(vertex), x[mask])
        return np.exp(log_weight) * h

    def child_masses(self, word: Word, children: np.ndarray) -> np.ndarray:
        """mu([omega e]) for every edge e in ``children``: lambda^{-n} nu(exp(S_n f) h o phi)."""
        children = np.asarray(children, dtype=np.int64)
        vertex_of = np.asarray(self.system.terminal)[children]
        masses = np.empty(children.size)
        for vertex in np.unique(vertex_of):
            mask = vertex_of == vertex
            selected = children[mask]
            x = np.broadcast_to(self.nodes[vertex], (selected.size, self.nodes[vertex].size))
            edges = np.broadcast_to(selected[:, None], x.shape)
            masses[mask] = self._pull_back(word, edges, x) @ self.weights[vertex]
        return np.clip(masses, 0.0, None) / self.eigenvalue ** (len(word) + 1)

    def cylinder(self, word: Word) -> float:
        """mu([omega]); the empty word has mass 1."""
        check_admissible(self.system.incidence, word)
        if not word:
            return 1.0
        return float(self.child_masses(word[:-1], np.array([word[-1]]))[0])


def limit_measure(system: GDMS, potential: EdgePotential, nodes: int = 48, chunk: int = 256) -> LimitMeasure:
    """Collocate the transfer operator of ``potential`` and extract its Gibbs state."""
    envelope = potential.sup_exp(system)
    if not np.isfinite(envelope).all() or envelope.sum() == 0:
        raise SummabilityError("potential is not summable over the edges")
    if system.truncated and potential.weights is None and potential.t <= 0.5:
        raise SummabilityError(f"t = {potential.t} is not summable on the untruncated edge set")
    size = len(system.vertices)
    grids = tuple(_chebyshev_nodes(float(lo), float(hi), nodes) for lo, hi in system.seeds)
    basis = tuple(BarycentricInterpolator(grid, np.eye(nodes)) for grid in grids)
    initial, terminal = np.asarray(system.initial), np.asarray(system.terminal)

    def blocks() -> Iterator[tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
        for vertex in range(size):
            incoming = np.flatnonzero(terminal == vertex)
            for start in range(0, incoming.size, chunk):
                block = incoming[start : start + chunk]
                x = np.broadcast_to(grids[vertex], (block.size, nodes))
                edges = np.broadcast_to(block[:, None], x.shape)
                yield vertex, block, edges, x

    operator = np.zeros((size * nodes, size * nodes))
    for vertex, block, edges, x in blocks():
        factor = np.exp(potential.values(system, edges, x))
        images = system.apply_array(edges, x)
        for target in np.unique(initial[block]):
            rows = initial[block] == target
            interpolation = basis[target](images[rows].ravel()).reshape(int(rows.sum()), nodes, nodes)
            operator[vertex * nodes : (vertex + 1) * nodes, target * nodes : (target + 1) * nodes] += np.einsum(
                "ej,ejk->jk", factor[rows], interpolation
            )

    values, left, right = linalg.eig(operator, left=True, right=True)
    k = int(np.argmax(values.real))
    eigenvalue = float(values[k].real)
    h = right[:, k].real
    h = h * np.sign(h.sum())
    w = left[:, k].real
    w = w / (w @ h)
    density = tuple(BarycentricInterpolator(grids[v], h[v * nodes : (v + 1) * nodes]) for v in range(size))
    weights = tuple(w[v * nodes : (v + 1) * nodes] for v in range(size))
    density_max = 1.01 * max(
        float(np.max(density[v](np.linspace(float(lo), float(hi), 4097)))) for v, (lo, hi) in enumerate(system.seeds)
    )
    measure = LimitMeasure(system, potential, grids, eigenvalue, density, weights, density_max)

    # int g dmu = lambda^{-1} nu(sum_e exp(f(e, .)) h(phi_e .) g(e, .)) for g depending on (omega_1, pi sigma omega)
    mean, chi = 0.0, 0.0
    for vertex, _, edges, x in blocks():
        kernel = measure._pull_back((), edges, x) / eigenvalue
        mean += float(np.sum((kernel * potential.values(system, edges, x)) @ weights[vertex]))
        chi -= float(np.sum((kernel * system.log_derivative_array(edges, x)) @ weights[vertex]))
    if system.truncated:
        logger.warning("edge set truncated at %d; neglected tail mass about %.3g", system.n_edges, system.tail_mass)
    return LimitMeasure(
        system,
        potential,
        grids,
        eigenvalue,
        density,
        weights,
        density_max,
        entropy=measure.pressure - mean,
        lyapunov=chi,
        mean_potential=mean,
    )


@dataclass(frozen=True)
class CodedOrbit:
    """A forward T_S orbit: ``points[k]`` has code ``codes[k:]`` followed by ``tail`` repeated."""

    points: np.ndarray
    codes: np.ndarray
    tail: Word


class ChaosGame:
    """Backward chain x -> phi_e(x), choosing e with probability exp(f(e, x)) h(phi_e x) / (lambda h(x)).

    Its stationary law is the projected Gibbs measure. Read backwards, a run is a
    forward T_S orbit whose codes are the chosen edges. Edges are drawn by rejection
    from the proposal q(e) proportional to sup exp(f(e, .)).
    """

    def __init__(self, measure: LimitMeasure, seed: Union[int, np.random.Generator], block: int = 4096) -> None:
        if len(measure.system.vertices) != 1:
            raise UnsupportedFamilyError("the chaos game runs on single-vertex systems")
        self.measure = measure
        self.system = measure.system
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.block = block
        self.envelope = measure.potential.sup_exp(self.system) * measure.density_max
        self.proposal = self.envelope / self.envelope.sum()
        self._start_edge = int(np.argmax(self.proposal))
        self._start = float(project_periodic(self.system, (), (self._start_edge,)))
        lo, hi = (float(v) for v in self.system.seeds[0])
        # h on a fine grid for the sequential sampler
        self._grid = (lo, (hi - lo) / 4096)
        self._table = measure.h(0, np.linspace(lo, hi, 4097)).tolist()

    def _h_scalar(self, x: float) -> float:
        lo, step = self._grid
        position = min(max((x - lo) / step, 0.0), 4095.999999)
        i = int(position)
        frac = position - i
        return self._table[i] * (1 - frac) + self._table[i + 1] * frac

    def points(self, n_points: int, steps: int = 64) -> np.ndarray:
        """``n_points`` independent samples of the measure, each after ``steps`` chain steps."""
        x = np.full(n_points, self._start)
        for _ in range(steps):
            pending = np.arange(n_points)
            result = x.copy()
            while pending.size:
                edges = self.rng.choice(self.system.n_edges, size=pending.size, p=self.proposal)
                images = self.system.apply_array(edges, x[pending])
                target = np.exp(self.measure.potential.values(self.system, edges, x[pending])) * self.measure.h(0, images)
                accept = self.rng.random(pending.size) * self.envelope[edges] < target
                result[pending[accept]] = images[accept]
                pending = pending[~accept]
            x = result
        return x

    def orbit(self, length: int, burn_in: int = 64) -> CodedOrbit:
        """A forward orbit of ``length`` points; the chain runs ``length + burn_in`` steps from a fixed point."""
        total = length + burn_in
        coefficients = self.system.coefficients.tolist()
        weights = list(self.measure.potential.weights) if self.measure.potential.weights is not None else None
        t = self.measure.potential.t
        envelope = self.envelope.tolist()
        chain = [self._start]
        chosen: list[int] = []
        x = self._start
        while len(chosen) < total:
            edges = self.rng.choice(self.system.n_edges, size=self.block, p=self.proposal).tolist()
            uniforms = self.rng.random(self.block).tolist()
            for edge, u in zip(edges, uniforms):
                a, b, c, d = coefficients[edge]
                denominator = c * x + d
                image = (a * x + b) / denominator
                value = (abs(a * d - b * c) / (denominator * denominator)) ** t if t else 1.0
                if weights is not None:
                    value *= math.exp(weights[edge])
                if u * envelope[edge] < value * self._h_scalar(image):
                    chosen.append(edge)
                    chain.append(image)
                    x = image
                    if len(chosen) == total:
                        break
        # time reversal: the last chain point comes first and its code starts with the last edge
        points = np.array(chain[::-1][:length])
        codes = np.array(chosen[::-1], dtype=np.int64)
        return CodedOrbit(points, codes, (self._start_edge,))


@dataclass(frozen=True)
class LyapunovEstimate:
    value: float
    stderr: float


def lyapunov(measure: LimitMeasure, sample_length: int, seed: int, n_batches: int = 20) -> LyapunovEstimate:
    """Birkhoff average of -log|phi'_{omega_1}(pi sigma omega)| along a sampled typical code."""
    orbit = ChaosGame(measure, seed).orbit(sample_length + 1)
    values = -measure.system.log_derivative_array(orbit.codes[:sample_length], orbit.points[1 : sample_length + 1])
    means = np.array([batch.mean() for batch in np.array_split(values, n_batches)])
    return LyapunovEstimate(float(values.mean()), float(means.std(ddof=1) / math.sqrt(n_batches)))


@dataclass(frozen=True)
class BallEstimate:
    lower: float
    upper: float
    exact: bool
    method: str
    cylinders: int = 0

    @property
    def value(self) -> float:
        return (self.lower + self.upper) / 2


def ball_measure(
    measure: LimitMeasure,
    y: float,
    r: float,
    method: str = "cylinder-cover",
    max_cylinders: int = 200_000,
    tolerance: float = 1e-3,
    n_samples: int = 100_000,
    seed: int = 0,
    strict: bool = False,
) -> BallEstimate:
    """mu_hat(B(y, r)) for the open ball.

    The cylinder cover brackets the value: cylinder images inside the closed ball count
    towards the lower bound (the measure has no atoms), images meeting the open ball
    are refined, heaviest first, until the undecided mass is below ``tolerance`` times
    the lower bound. Monte Carlo returns the empirical frequency +- 3 sigma.
    """
    system = measure.system
    if y - r <= min(float(lo) for lo, _ in system.seeds) and y + r >= max(float(hi) for _, hi in system.seeds):
        return BallEstimate(1.0, 1.0, True, method)
    if method == "monte-carlo":
        points = ChaosGame(measure, seed).points(n_samples)
        p = float(np.mean(np.abs(points - y) < r))
        spread = 3 * math.sqrt(p * (1 - p) / n_samples)
        return BallEstimate(max(p - spread, 0.0), min(p + spread, 1.0), False, method)
    if method != "cylinder-cover":
        raise ValueError(f"unknown ball method '{method}'")

    slack = 4 * math.ulp(max(abs(y) + r, 1.0))
    lower, visited, counter = 0.0, 0, 0
    undecided = 1.0
    frontier: list[tuple[float, int, Word]] = [(-1.0, 0, ())]
    while frontier and undecided > tolerance * lower:
        if visited > max_cylinders:
            if strict:
                raise BudgetExceededError("cylinder cover", visited, max_cylinders)
            break
        negative_mass, _, word = heapq.heappop(frontier)
        undecided += negative_mass
        children = np.arange(system.n_edges) if not word else system.incidence.followers(word[-1])
        a, b, c, d = system.coefficients[children].T
        ends = np.stack([
            (a * system.seed_lo[children] + b) / (c * system.seed_lo[children] + d),
            (a * system.seed_hi[children] + b) / (c * system.seed_hi[children] + d),
        ])
        if word:
            parent = system.word_map(word)
            ends = (float(parent.a) * ends + float(parent.b)) / (float(parent.c) * ends + float(parent.d))
        lo, hi = ends.min(axis=0), ends.max(axis=0)
        meets = (lo < y + r) & (hi > y - r)
        if not meets.any():
            continue
        selected = children[meets]
        inside = ((lo >= y - r - slack) & (hi <= y + r + slack))[meets]
        masses = measure.child_masses(word, selected)
        visited += selected.size
        lower += float(masses[inside].sum())
        for edge, mass in zip(selected[~inside].tolist(), masses[~inside].tolist()):
            if mass > 0:
                counter += 1
                undecided += mass
                heapq.heappush(frontier, (-mass, counter, (*word, edge)))
    upper = lower + sum(-m for m, _, _ in frontier)
    return BallEstimate(lower, min(upper, 1.0), not frontier, method, visited)


@dataclass(frozen=True)
class PowerLawFit:
    C: float
    alpha: float
    alpha_stderr: float
    alpha_theory: float
    residuals: np.ndarray
    radii: np.ndarray
    masses: np.ndarray

    @property
    def exceeds_floor(self) -> bool:
        return self.alpha >= self.alpha_theory - 3 * self.alpha_stderr


def power_law_fit(measure: LimitMeasure, y: float, radii: np.ndarray, **ball_options: Any) -> PowerLawFit:
    """mu_hat(B(y, r)) <= C r^alpha fitted in two steps.

    alpha is the least-squares slope of log mu_hat(B(y, r)) against log r. With alpha
    fixed, the least-squares intercept under the constraint that the line lies above
    every point is the largest log(mu / r^alpha), which gives C (at least 1). The
    residuals are measured from that envelope, so they are all <= 0.
    """
    radii = np.sort(np.asarray(radii, dtype=float))
    if radii.size < 10 or radii[-1] / radii[0] < 1e3:
        raise ValueError("need at least 10 radii spanning at least 3 decades")
    masses = np.array([ball_measure(measure, y, float(r), **ball_options).value for r in radii])
    if (masses <= 0).any() or np.allclose(masses, masses[0]):
        raise DegenerateMeasureError("ball measures are constant or vanish; no power law to fit")
    fit = linregress(np.log(radii), np.log(masses))
    alpha = float(fit.slope)
    offsets = np.log(masses) - alpha * np.log(radii)
    log_c = max(0.0, float(offsets.max()))
    return PowerLawFit(math.exp(log_c), alpha, float(fit.stderr), measure.alpha_theory, offsets - log_c, radii, masses)


@dataclass(frozen=True)
class CylinderCover:
    """The depth-n(r) cylinders whose images meet B(y, r), n(r) least with the diameter bound <= r^2."""

    depth: int
    words: tuple[Word, ...]
    lo: float
    hi: float
    inside_enlarged_ball: bool


def gdms_cover(system: GDMS, y: float, r: float, budget: int = 1 << 16) -> CylinderCover:
    depth = 1
    while system.diameter_bound(depth) > r * r:
        depth += 1
    words: list[Word] = [()]
    for _ in range(depth):
        refined: list[Word] = []
        for word in words:
            children = range(system.n_edges) if not word else system.incidence.followers(word[-1]).tolist()
            for edge in children:
                child = (*word, int(edge))
                lo, hi = system.word_map(child).image(*system.seed(int(edge)))
                if float(lo) < y + r and float(hi) > y - r:
                    refined.append(child)
            if len(refined) > budget:
                raise BudgetExceededError("cylinder cover", len(refined), budget)
        words = refined
    images = [system.word_map(w).image(*system.seed(w[-1])) for w in words]
    lo = float(min(i[0] for i in images)) if images else y
    hi = float(max(i[1] for i in images)) if images else y
    enlarged = r + r * r
    return CylinderCover(depth, tuple(words), lo, hi, lo >= y - enlarged - 1e-15 and hi <= y + enlarged + 1e-15)


@dataclass(frozen=True)
class MeasureInvariance:
    """Empirical mu_hat and mu_hat o T_S^{-1} on a family of balls, with the largest z-score."""

    centers: np.ndarray
    radius: float
    direct: np.ndarray
    pushed: np.ndarray
    max_z: float


def check_invariance(
    measure: LimitMeasure, centers: np.ndarray, radius: float, n_samples: int, seed: int
) -> MeasureInvariance:
    """Compare mu_hat(B) with mu_hat(T_S^{-1} B) along a coded orbit."""
    orbit = ChaosGame(measure, seed).orbit(n_samples + 1)
    points, images = orbit.points[:-1], orbit.points[1:]
    direct = np.array([np.mean(np.abs(points - c) < radius) for c in centers])
    pushed = np.array([np.mean(np.abs(images - c) < radius) for c in centers])
    spread = np.sqrt(np.maximum(direct * (1 - direct), 1e-12) * 2 / n_samples)
    return MeasureInvariance(centers, radius, direct, pushed, float(np.max(np.abs(direct - pushed) / spread)))


@dataclass(frozen=True)
class ConjugacyCheck:
    """T_S o pi against pi o sigma on sampled codes.

    ``max_excess`` is the largest gap |T_S(pi omega) - pi(sigma omega)| beyond the
    diameter of the projection interval of ``sigma omega`` cut at ``depth``.
    """

    samples: int
    depth: int
    max_error: float
    max_excess: float
    outside: int
    holds: bool


def check_conjugacy(
    measure: LimitMeasure, n_samples: int, seed: int, depth: int = 12, tolerance: float = 1e-9
) -> ConjugacyCheck:
    system = measure.system
    orbit = ChaosGame(measure, seed).orbit(n_samples + depth + 1)
    inverses = [m.inverse() for m in system.maps]
    worst_error, worst_excess, outside = 0.0, -math.inf, 0
    for k in range(n_samples):
        word = tuple(int(e) for e in orbit.codes[k : k + depth + 1])
        here = project(system, word)
        there = project(system, word[1:])
        x = float(orbit.points[k])
        if not float(here.lo) - tolerance <= x <= float(here.hi) + tolerance:
            outside += 1
        error = abs(float(inverses[word[0]](x)) - float(orbit.points[k + 1]))
        worst_error = max(worst_error, error)
        worst_excess = max(worst_excess, error - 2 * there.radius)
    return ConjugacyCheck(n_samples, depth, worst_error, worst_excess, outside, outside == 0 and worst_excess <= tolerance)


@dataclass(frozen=True)
class InjectivityCheck:
    """Distinct sampled codes against distinct points, at a fixed code depth."""

    samples: int
    depth: int
    distinct_codes: int
    overlaps: int
    collisions: int

    @property
    def holds(self) -> bool:
        return self.overlaps == 0 and self.collisions == 0


def check_injectivity(measure: LimitMeasure, n_samples: int, seed: int, depth: int = 8) -> InjectivityCheck:
    """Depth-``depth`` prefixes of sampled codes must have interior-disjoint images, and no sampled
    point may carry two different prefixes.
    """
    system = measure.system
    orbit = ChaosGame(measure, seed).orbit(n_samples + depth)
    owners: dict[float, set[Word]] = {}
    for k in range(n_samples):
        word = tuple(int(e) for e in orbit.codes[k : k + depth])
        owners.setdefault(float(orbit.points[k]), set()).add(word)
    words: set[Word] = set().union(*owners.values())
    intervals = sorted(system.word_map(w).image(*system.seed(w[-1])) for w in words)
    overlaps = sum(first[1] > second[0] for first, second in zip(intervals, intervals[1:]))
    collisions = sum(len(codes) > 1 for codes in owners.values())
    return InjectivityCheck(n_samples, depth, len(words), overlaps, collisions)
