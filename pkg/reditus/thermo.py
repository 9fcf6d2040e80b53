"""Thermodynamic formalism on subshifts of finite type.

Potentials, Birkhoff sums, topological pressure, Gibbs/equilibrium states of
locally constant potentials (exact, from Perron eigen-data), and seeded samplers
that realize those states as Markov chains on symbols.
"""

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import linregress

from .errors import DegenerateMeasureError, IrreducibilityError, SummabilityError
from .symbolic import (
    DEFAULT_ENUMERATION_BUDGET,
    IncidenceStructure,
    SymbolPath,
    Word,
    admissible_array,
    check_admissible,
    is_finitely_irreducible,
)

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-14
GOLDEN = (1 + math.sqrt(5)) / 2


def seed_stream(master_seed: int, index: int) -> np.random.Generator:
    """Generator for task ``index``: SeedSequence(master_seed, spawn_key=(index,)).

    The stream depends only on the master seed and the task index, never on the
    number of workers.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


@dataclass(frozen=True)
class SummabilityCertificate:
    """Sum over e of exp(sup f on [e]) on the (truncated) alphabet, with the tail beyond it."""

    total: float
    tail_bound: float
    truncated: bool


class Potential:
    """A Hoelder potential known through its (inf, sup) over cylinders."""

    name: str = "potential"
    depth: Optional[int] = None
    holder_exponent: float = 1.0
    variation: float = 0.0

    def __init__(self, alphabet_size: int) -> None:
        self.alphabet_size = alphabet_size

    def bounds(self, word: Word, incidence: Optional[IncidenceStructure] = None) -> tuple[float, float]:
        raise NotImplementedError

    def summability(self) -> SummabilityCertificate:
        raise NotImplementedError

    def variation_bound(self, n: int) -> float:
        """V_alpha(f) exp(-alpha_f (n - 1)), the allowed sup - inf on depth-n cylinders."""
        return self.variation * math.exp(-self.holder_exponent * (n - 1))


class LocallyConstantPotential(Potential):
    """f(omega) = table[omega_1] (depth 1) or table[omega_1, omega_2] (depth 2)."""

    def __init__(self, table: np.ndarray, name: str = "locally-constant") -> None:
        values = np.array(table, dtype=float)
        if values.ndim not in (1, 2) or (values.ndim == 2 and values.shape[0] != values.shape[1]):
            raise ValueError(f"potential table must be a vector or a square matrix, got shape {values.shape}")
        super().__init__(values.shape[0])
        values.setflags(write=False)
        self.table = values
        self.name = name
        self.depth = values.ndim
        self.variation = 0.0 if values.ndim == 1 else float(np.ptp(values, axis=1).max())

    def pair_table(self) -> np.ndarray:
        """The potential as a function of the first two symbols."""
        if self.depth == 1:
            return np.repeat(self.table[:, None], self.alphabet_size, axis=1)
        return self.table

    def bounds(self, word: Word, incidence: Optional[IncidenceStructure] = None) -> tuple[float, float]:
        if not word:
            raise ValueError("bounds need a non-empty word")
        if self.depth == 1:
            value = float(self.table[word[0]])
            return value, value
        if len(word) >= 2:
            value = float(self.table[word[0], word[1]])
            return value, value
        row = self.table[word[0]]
        if incidence is not None:
            row = row[incidence.followers(word[0])]
        return float(row.min()), float(row.max())

    def last_term_bounds(self, incidence: IncidenceStructure) -> tuple[np.ndarray, np.ndarray]:
        """Per symbol a, (inf, sup) of f over the depth-1 cylinder [a]."""
        if self.depth == 1:
            return self.table.copy(), self.table.copy()
        masked = np.where(incidence.matrix > 0, self.table, np.nan)
        return np.nanmin(masked, axis=1), np.nanmax(masked, axis=1)

    def summability(self) -> SummabilityCertificate:
        sup = self.table if self.depth == 1 else self.table.max(axis=1)
        return SummabilityCertificate(float(np.exp(sup).sum()), 0.0, False)


class GaussPotential(Potential):
    """t log|phi'_{omega_1}(pi(sigma omega))| for the continued-fraction system, phi_d(x) = 1/(d + x).

    Symbol ``e`` stands for the digit ``e + 1``; the alphabet is truncated at ``truncation``.
    """

    def __init__(self, t: float, truncation: int) -> None:
        if not t > 0.5:
            raise SummabilityError(f"gauss_t needs t > 1/2 to be summable, got t = {t}")
        super().__init__(truncation)
        self.t = t
        self.name = f"gauss_t({t})"
        self.holder_exponent = 2 * math.log(GOLDEN)
        self.variation = 2 * t * GOLDEN**2

    def bounds(self, word: Word, incidence: Optional[IncidenceStructure] = None) -> tuple[float, float]:
        if not word:
            raise ValueError("bounds need a non-empty word")
        low, high = continued_fraction_interval(tuple(s + 1 for s in word[1:]))
        digit = word[0] + 1
        return -2 * self.t * math.log(digit + high), -2 * self.t * math.log(digit + low)

    def summability(self) -> SummabilityCertificate:
        digits = np.arange(1, self.alphabet_size + 1, dtype=float)
        total = float(np.sum(digits ** (-2 * self.t)))
        tail = self.alphabet_size ** (1 - 2 * self.t) / (2 * self.t - 1)
        return SummabilityCertificate(total, tail, True)


def continued_fraction_interval(digits: tuple[int, ...]) -> tuple[float, float]:
    """The closed interval of points whose continued fraction starts with ``digits``."""
    if not digits:
        return 0.0, 1.0
    ends = []
    for tail in (0.0, 1.0):
        x = tail
        for d in reversed(digits):
            x = 1.0 / (d + x)
        ends.append(x)
    return min(ends), max(ends)


def make_potential(name: str, params: dict, alphabet_size: int) -> Potential:
    """Build a potential from its config name and parameters."""
    if name == "zero":
        return LocallyConstantPotential(np.zeros(alphabet_size), name="zero")
    if name == "bernoulli":
        p = np.asarray(params["p"], dtype=float)
        if p.size != alphabet_size or (p <= 0).any() or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
            raise ValueError(f"bernoulli weights must be {alphabet_size} positive numbers summing to 1")
        return LocallyConstantPotential(np.log(p), name="bernoulli")
    if name == "markov_depth1":
        table = np.asarray(params["table"], dtype=float)
        if table.shape != (alphabet_size, alphabet_size):
            raise ValueError(f"markov_depth1 table must be {alphabet_size}x{alphabet_size}")
        return LocallyConstantPotential(table, name="markov_depth1")
    if name == "gauss_t":
        return GaussPotential(float(params.get("t", 1.0)), alphabet_size)
    raise ValueError(f"unknown potential '{name}'")


def birkhoff_sum_bounds(
    f: Potential, omega: Word, incidence: Optional[IncidenceStructure] = None
) -> tuple[float, float]:
    """(inf, sup) of S_n f over [omega], summing the per-shift cylinder bounds."""
    if incidence is not None:
        check_admissible(incidence, omega)
    if not omega:
        raise ValueError("Birkhoff sums need |omega| >= 1")
    lower = upper = 0.0
    for j in range(len(omega)):
        low, high = f.bounds(omega[j:], incidence)
        lower += low
        upper += high
    return lower, upper


def _birkhoff_bounds_array(
    f: LocallyConstantPotential, words: np.ndarray, incidence: IncidenceStructure
) -> tuple[np.ndarray, np.ndarray]:
    pair = f.pair_table()
    n = words.shape[1]
    exact = pair[words[:, :-1], words[:, 1:]].sum(axis=1) if n > 1 else np.zeros(words.shape[0])
    last_low, last_high = f.last_term_bounds(incidence)
    return exact + last_low[words[:, -1]], exact + last_high[words[:, -1]]


@dataclass(frozen=True)
class PressureEstimate:
    value: float
    depth: int
    partial: tuple[float, ...]
    method: str


def weighted_matrix(f: LocallyConstantPotential, incidence: IncidenceStructure) -> np.ndarray:
    """M_ab = A_ab exp(f(a...b))."""
    return incidence.matrix * np.exp(f.pair_table())


def perron(
    matrix: np.ndarray, tolerance: float = EIGEN_TOLERANCE, max_iter: int = 200_000
) -> tuple[float, np.ndarray, np.ndarray]:
    """Perron eigenvalue with positive left/right eigenvectors, normalized so sum(r) = 1 and l.r = 1.

    Power iteration from the all-ones vector; 2x2 matrices use the closed form.
    """
    if matrix.shape == (2, 2):
        (a, b), (c, d) = matrix
        trace, det = a + d, a * d - b * c
        lam = (trace + math.sqrt(max(trace * trace - 4 * det, 0.0))) / 2
        right = _null_vector_2x2(matrix, lam)
        left = _null_vector_2x2(matrix.T, lam)
    else:
        lam, right = _power_iteration(matrix, tolerance, max_iter)
        _, left = _power_iteration(matrix.T, tolerance, max_iter)
    right = right / right.sum()
    left = left / (left @ right)
    return float(lam), left, right


def _null_vector_2x2(matrix: np.ndarray, lam: float) -> np.ndarray:
    (a, b), (c, d) = matrix
    candidates = [np.array([b, lam - a]), np.array([lam - d, c])]
    vector = max(candidates, key=lambda v: np.abs(v).sum())
    if vector.sum() < 0:
        vector = -vector
    return np.abs(vector)


def _power_iteration(matrix: np.ndarray, tolerance: float, max_iter: int) -> tuple[float, np.ndarray]:
    vector = np.ones(matrix.shape[0]) / matrix.shape[0]
    lam = 0.0
    for _ in range(max_iter):
        image = matrix @ vector
        lam = image.sum()
        image = image / lam
        if np.abs(image - vector).sum() < tolerance:
            return float(lam), image
        vector = image
    raise ArithmeticError("power iteration did not converge")


def _truncated_pressure(f: Potential, incidence: IncidenceStructure, depth: int, budget: int) -> PressureEstimate:
    partial = []
    if isinstance(f, LocallyConstantPotential):
        # Z_n = 1^T M^{n-1} u with u_a = exp(sup of the last term), carried in log scale
        matrix = weighted_matrix(f, incidence)
        _, last_high = f.last_term_bounds(incidence)
        vector = np.exp(last_high)
        log_scale = 0.0
        for n in range(1, depth + 1):
            if n > 1:
                vector = matrix @ vector
            norm = vector.sum()
            log_scale += math.log(norm)
            vector = vector / norm
            partial.append(log_scale / n)
    else:
        for n in range(1, depth + 1):
            words = admissible_array(incidence, n, budget)
            sups = [birkhoff_sum_bounds(f, tuple(int(s) for s in w))[1] for w in words]
            partial.append(float(logsumexp(sups)) / n)
    return PressureEstimate(partial[-1], depth, tuple(partial), "truncated-limit")


def pressure(
    f: Potential,
    incidence: IncidenceStructure,
    depth: int = 12,
    method: str = "spectral",
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> PressureEstimate:
    """Topological pressure P(f), by the truncated limit of partition sums or spectrally."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if method == "truncated-limit":
        return _truncated_pressure(f, incidence, depth, budget)
    if method != "spectral":
        raise ValueError(f"unknown pressure method '{method}'")
    if not isinstance(f, LocallyConstantPotential):
        raise ValueError("the spectral method needs a locally constant potential")
    if not incidence.is_primitive():
        logger.warning("incidence matrix is not primitive; falling back to the truncated-limit pressure")
        return _truncated_pressure(f, incidence, depth, budget)
    lam, _, _ = perron(weighted_matrix(f, incidence))
    return PressureEstimate(math.log(lam), depth, (math.log(lam),), "spectral")


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    size = kernel.shape[0]
    system = np.vstack([kernel.T - np.eye(size), np.ones(size)])
    rhs = np.zeros(size + 1)
    rhs[-1] = 1.0
    solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return np.clip(solution, 0.0, None) / np.clip(solution, 0.0, None).sum()


def _entropy(stationary: np.ndarray, kernel: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(kernel > 0, kernel * np.log(kernel), 0.0)
    return float(-(stationary[:, None] * terms).sum())


@dataclass(frozen=True, eq=False)
class GibbsState:
    """The Gibbs/equilibrium state mu_f, realized as a stationary Markov chain on symbols."""

    potential: LocallyConstantPotential
    incidence: IncidenceStructure
    pressure: float
    eigenvalue: float
    left: np.ndarray
    right: np.ndarray
    stationary: np.ndarray
    kernel: np.ndarray
    gibbs_constant: float
    entropy: float
    mean_potential: float
    decay: float
    method: str = "exact"
    q_inflation: float = 1.0
    tail_bound: float = 0.0
    source_potential: Optional[Potential] = None

    @property
    def alphabet_size(self) -> int:
        return self.incidence.alphabet_size

    @property
    def reported_q(self) -> float:
        return self.gibbs_constant * self.q_inflation

    def cylinder(self, word: Word) -> float:
        """mu_f([omega]); the empty word has mass 1."""
        if not word:
            return 1.0
        mass = float(self.stationary[word[0]])
        for a, b in zip(word[:-1], word[1:]):
            mass *= float(self.kernel[a, b])
        return mass

    def cylinder_masses(self, words: np.ndarray) -> np.ndarray:
        """Vectorized mu_f over the rows of ``words``."""
        masses = self.stationary[words[:, 0]].copy()
        for j in range(words.shape[1] - 1):
            masses *= self.kernel[words[:, j], words[:, j + 1]]
        return masses

    def sampler(self, seed: Union[int, np.random.Generator]) -> "MarkovSampler":
        return MarkovSampler(self.stationary, self.kernel, seed)


def _gibbs_constant(
    lam: float, left: np.ndarray, right: np.ndarray, f: LocallyConstantPotential, incidence: IncidenceStructure
) -> float:
    # mu([omega]) / exp(S_n f - nP) = l_{omega_1} r_{omega_n} lam / ((l.r) exp(last term))
    low, high = f.last_term_bounds(incidence)
    ratio_high = np.outer(left, right * lam * np.exp(-low)) / (left @ right)
    ratio_low = np.outer(left, right * lam * np.exp(-high)) / (left @ right)
    return float(max(ratio_high.max(), 1.0 / ratio_low.min(), 1.0))


def decay_exponent(stationary: np.ndarray, kernel: np.ndarray, depth: int) -> float:
    """beta: min over n <= depth of -(1/n) log max_omega mu([omega|_n])."""
    best = stationary.copy()
    exponents = []
    for n in range(1, depth + 1):
        if n > 1:
            best = (best[:, None] * kernel).max(axis=0)
        exponents.append(-math.log(best.max()) / n)
    return float(min(exponents))


def _blocked_potential(f: Potential, incidence: IncidenceStructure) -> tuple[LocallyConstantPotential, float]:
    """Depth-2 approximation: midpoint of f over each [ab], with the largest half-width."""
    size = incidence.alphabet_size
    table = np.zeros((size, size))
    half_width = 0.0
    for a in range(size):
        for b in incidence.followers(a):
            low, high = f.bounds((a, int(b)), incidence)
            table[a, b] = (low + high) / 2
            half_width = max(half_width, (high - low) / 2)
    return LocallyConstantPotential(table, name=f"{f.name}|blocked"), half_width


def gibbs_state(
    f: Potential, incidence: IncidenceStructure, decay_depth: int = 12, witness_len: Optional[int] = None
) -> GibbsState:
    """The equilibrium state of f on E_A^infinity.

    Exact from Perron eigen-data for locally constant potentials of depth <= 2; general
    Hoelder potentials are replaced by their depth-2 blocking and the distortion they
    drop is reported as a multiplicative inflation of Q.
    """
    if is_finitely_irreducible(incidence, witness_len or incidence.alphabet_size) is None:
        raise IrreducibilityError("no finite irreducibility witness for the incidence matrix")
    certificate = f.summability()
    if not math.isfinite(certificate.total):
        raise SummabilityError(f"potential {f.name} is not summable")
    if certificate.truncated:
        logger.warning("alphabet truncated at %d; mass tail bound %.3g", incidence.alphabet_size, certificate.tail_bound)

    method, inflation, source = "exact", 1.0, None
    if isinstance(f, LocallyConstantPotential):
        local = f
    else:
        local, half_width = _blocked_potential(f, incidence)
        method, source = "blocked", f
        # S_n f differs from S_n f_2 by at most the summed half-widths of the deeper cylinders
        tail = sum(f.variation_bound(n) / 2 for n in range(3, 200))
        inflation = math.exp(2 * (half_width + tail))

    matrix = weighted_matrix(local, incidence)
    lam, left, right = perron(matrix)
    kernel = matrix * right[None, :] / (lam * right[:, None])
    stationary = left * right / (left @ right)
    entropy = _entropy(stationary, kernel)
    mean = float((stationary[:, None] * kernel * np.where(incidence.matrix > 0, local.pair_table(), 0.0)).sum())
    return GibbsState(
        potential=local,
        incidence=incidence,
        pressure=math.log(lam),
        eigenvalue=lam,
        left=left,
        right=right,
        stationary=stationary,
        kernel=kernel,
        gibbs_constant=_gibbs_constant(lam, left, right, local, incidence),
        entropy=entropy,
        mean_potential=mean,
        decay=decay_exponent(stationary, kernel, decay_depth),
        method=method,
        q_inflation=inflation,
        tail_bound=certificate.tail_bound,
        source_potential=source,
    )


@dataclass(frozen=True)
class GibbsAudit:
    max_ratio: float
    min_ratio: float
    worst_ratio: float
    attaining_cylinder: Word
    gibbs_constant: float
    depth: int
    additivity_error: float
    normalization_error: float
    decay_ok: bool

    @property
    def passed(self) -> bool:
        q = self.gibbs_constant * (1 + 1e-9)
        return self.max_ratio <= q and self.min_ratio >= 1 / q


def verify_gibbs_property(
    state: GibbsState, audit_depth: int, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> GibbsAudit:
    """Scan all cylinders up to ``audit_depth`` and compare mu([omega]) with exp(S_n f - nP)."""
    worst, attaining = 1.0, ()
    max_ratio, min_ratio = 0.0, math.inf
    additivity = 0.0
    decay_ok = True
    normalization = abs(state.stationary.sum() - 1.0)
    for n in range(1, audit_depth + 1):
        words = admissible_array(state.incidence, n, budget)
        masses = state.cylinder_masses(words)
        lower, upper = _birkhoff_bounds_array(state.potential, words, state.incidence)
        high = masses / np.exp(lower - n * state.pressure)
        low = masses / np.exp(upper - n * state.pressure)
        max_ratio = max(max_ratio, float(high.max()))
        min_ratio = min(min_ratio, float(low.min()))
        extremes = np.maximum(high, 1.0 / low)
        index = int(np.argmax(extremes))
        if extremes[index] > worst:
            worst, attaining = float(extremes[index]), tuple(int(s) for s in words[index])
        decay_ok = decay_ok and bool(masses.max() <= math.exp(-state.decay * n) * (1 + 1e-12))
        if n < audit_depth:
            children = admissible_array(state.incidence, n + 1, budget)
            child_masses = state.cylinder_masses(children)
            # children are sorted, so each parent's children form a contiguous block
            parents = {tuple(w): i for i, w in enumerate(words.tolist())}
            sums = np.zeros(len(words))
            np.add.at(sums, [parents[tuple(w)] for w in children[:, :-1].tolist()], child_masses)
            additivity = max(additivity, float(np.abs(sums - masses).max()))
    return GibbsAudit(
        max_ratio=max_ratio,
        min_ratio=min_ratio,
        worst_ratio=worst,
        attaining_cylinder=attaining,
        gibbs_constant=state.reported_q,
        depth=audit_depth,
        additivity_error=additivity,
        normalization_error=normalization,
        decay_ok=decay_ok,
    )


def free_energy(f: LocallyConstantPotential, incidence: IncidenceStructure, kernel: np.ndarray) -> float:
    """h_nu + int f dnu for the stationary Markov measure nu of ``kernel``."""
    kernel = np.asarray(kernel, dtype=float)
    if (kernel[incidence.matrix == 0] > 0).any():
        raise ValueError("kernel charges transitions forbidden by the incidence matrix")
    if not np.allclose(kernel.sum(axis=1), 1.0):
        raise ValueError("kernel rows must sum to 1")
    stationary = stationary_distribution(kernel)
    mean = float((stationary[:, None] * kernel * np.where(incidence.matrix > 0, f.pair_table(), 0.0)).sum())
    return _entropy(stationary, kernel) + mean


class MarkovSampler:
    """Seeded sampler of the stationary Markov chain (initial, kernel) on symbols."""

    def __init__(self, initial: np.ndarray, kernel: np.ndarray, seed: Union[int, np.random.Generator]) -> None:
        self.initial = np.asarray(initial, dtype=float)
        self.kernel = np.asarray(kernel, dtype=float)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._cumulative = np.cumsum(self.kernel, axis=1)
        self._cumulative[:, -1] = 1.0
        self.independent = bool(np.allclose(self.kernel, self.kernel[0]))

    def stationarity_error(self) -> float:
        return float(np.abs(self.initial @ self.kernel - self.initial).max())

    def paths(self, n_paths: int, length: int, start: Optional[np.ndarray] = None) -> np.ndarray:
        """Array (n_paths, length) of independent chain paths; ``start`` fixes the first symbols."""
        size = self.kernel.shape[0]
        if self.independent and start is None:
            return self.rng.choice(size, size=(n_paths, length), p=self.kernel[0])
        paths = np.empty((n_paths, length), dtype=np.int64)
        if length == 0:
            return paths
        paths[:, 0] = start if start is not None else self.rng.choice(size, size=n_paths, p=self.initial)
        if self.independent:
            paths[:, 1:] = self.rng.choice(size, size=(n_paths, length - 1), p=self.kernel[0])
            return paths
        for j in range(1, length):
            u = self.rng.random(n_paths)
            paths[:, j] = np.argmax(self._cumulative[paths[:, j - 1]] > u[:, None], axis=1)
        return paths

    def path(self, length: int) -> np.ndarray:
        return self.paths(1, length)[0]

    def continue_path(self, last: int, length: int) -> np.ndarray:
        """``length`` further symbols after ``last``."""
        return self.paths(1, length + 1, start=np.array([last]))[0, 1:]

    def blocks(self, first: int, block: int = 65_536) -> Iterator[np.ndarray]:
        current = self.path(first)
        yield current
        while True:
            current = self.continue_path(int(current[-1]), block) if current.size else self.path(block)
            yield current


def sample_typical(state: GibbsState, length: int, seed: int) -> SymbolPath:
    """A mu_f-typical path; ``length`` symbols are materialized, more on demand."""
    sampler = state.sampler(seed)
    path = SymbolPath.from_blocks(sampler.blocks(length), key=("typical", id(state), seed), incidence=state.incidence)
    path.prefix(length)
    return path


@dataclass(frozen=True)
class MixingEstimate:
    ratio: float
    stderr: float
    exact: bool


def mixing_probe(
    state: GibbsState,
    a_word: Word,
    b_word: Word,
    gap: int,
    method: str = "exact",
    n_samples: int = 100_000,
    seed: int = 0,
) -> MixingEstimate:
    """mu(T^{-gap} A cap B) / (mu(A) mu(B)) for cylinders A = [a_word], B = [b_word]."""
    mass_a, mass_b = state.cylinder(a_word), state.cylinder(b_word)
    if mass_a == 0 or mass_b == 0:
        raise DegenerateMeasureError("mixing probe on a measure-zero cylinder")
    if gap < len(b_word):
        raise ValueError(f"gap {gap} must be at least depth(B) = {len(b_word)}")
    if method == "exact":
        steps = gap - len(b_word) + 1
        transition = np.linalg.matrix_power(state.kernel, steps)[b_word[-1], a_word[0]]
        return MixingEstimate(float(transition / state.stationary[a_word[0]]), 0.0, True)
    paths = state.sampler(seed).paths(n_samples, gap + len(a_word))
    inside = np.ones(n_samples, dtype=bool)
    for j, s in enumerate(b_word):
        inside &= paths[:, j] == s
    for j, s in enumerate(a_word):
        inside &= paths[:, gap + j] == s
    p = inside.mean()
    stderr = math.sqrt(p * (1 - p) / n_samples) / (mass_a * mass_b)
    return MixingEstimate(float(p / (mass_a * mass_b)), stderr, False)


@dataclass(frozen=True)
class MixingFit:
    """Empirical stand-ins for C (intersection bound) and D, gamma (psi-mixing envelope)."""

    C: float
    D: float
    gamma: float
    deviations: tuple[float, ...] = field(default=())


def fit_mixing_constants(state: GibbsState, max_gap: int = 30) -> MixingFit:
    """Fit C, D, gamma from exact probes on depth-1 cylinders at gaps 1..max_gap + 1.

    For a Markov measure the ratio depends only on the last symbol of B and the first
    of A, so depth-1 probes cover every cylinder pair.
    """
    power = np.eye(state.alphabet_size)
    ratios = []
    for _ in range(max_gap + 1):
        power = power @ state.kernel
        ratios.append(power / state.stationary[None, :])
    C = max(1.0, float(max(r.max() for r in ratios)))
    deviations = tuple(float(np.abs(r - 1).max()) for r in ratios)
    positive = [(j, d) for j, d in enumerate(deviations) if d > 1e-14]
    if len(positive) < 2:
        return MixingFit(C, 0.0, 0.5, deviations)
    fit = linregress([j for j, _ in positive], [math.log(d) for _, d in positive])
    gamma = min(max(math.exp(fit.slope), 1e-12), 1 - 1e-12)
    D = max(d / gamma**j for j, d in positive)
    return MixingFit(C, float(D), float(gamma), deviations)


def refine_words(words: Sequence[Word], incidence: IncidenceStructure, depth: int) -> set[Word]:
    refined: set[Word] = set()
    for word in words:
        stack = [tuple(word)]
        while stack:
            current = stack.pop()
            if len(current) == depth:
                refined.add(current)
                continue
            followers = incidence.followers(current[-1]) if current else range(incidence.alphabet_size)
            stack.extend((*current, int(b)) for b in followers)
    return refined


def taboo_hitting(state: GibbsState, words: Sequence[Word], max_n: int, start: str = "stationary") -> np.ndarray:
    """P(tau = n) for n = 1..max_n, tau the first n >= 1 with sigma^n in the union of [w].

    Runs the higher-block chain of the common depth with the region's blocks as
    taboo states. ``start="region"`` conditions the start on the region itself,
    which gives the first-return distribution.
    """
    if not words:
        raise DegenerateMeasureError("empty region")
    depth = max(len(w) for w in words)
    if depth == 0:
        raise DegenerateMeasureError("the empty word covers the whole space")
    blocks = admissible_array(state.incidence, depth)
    index = {tuple(int(s) for s in row): i for i, row in enumerate(blocks)}
    region = np.zeros(len(blocks), dtype=bool)
    for word in refine_words(words, state.incidence, depth):
        if word in index:
            region[index[word]] = True
    masses = state.cylinder_masses(blocks)
    region_mass = float(masses[region].sum())
    if region_mass == 0:
        raise DegenerateMeasureError("region has zero mass")

    transition = np.zeros((len(blocks), len(blocks)))
    for i, row in enumerate(blocks):
        last = int(row[-1])
        for b in state.incidence.followers(last):
            j = index.get((*(int(s) for s in row[1:]), int(b)))
            if j is not None:
                transition[i, j] += state.kernel[last, b]

    if start == "stationary":
        current = masses.copy()
    elif start == "region":
        current = np.where(region, masses, 0.0) / region_mass
    else:
        raise ValueError(f"unknown start '{start}'")
    probabilities = np.empty(max_n)
    for n in range(max_n):
        current = current @ transition
        probabilities[n] = current[region].sum()
        current[region] = 0.0
    return probabilities
