"""Experiment registry: builds systems and measures from a config, runs one experiment, writes artifacts."""

import copy
import itertools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .core import (
    ExperimentConfig,
    Report,
    line_of,
    load_config,
    parse_experiment_config,
    run_tasks,
    save_config,
    write_csv,
)
from .errors import BudgetExceededError, ConfigError, LadderInfeasibleError
from .expanding import (
    BUILTIN_MAPS,
    AffineMarkovMap,
    distance,
    good_radius_density,
    make_map,
    markov_cover,
)
from .gdms import (
    BUILTIN_SYSTEMS,
    ChaosGame,
    EdgePotential,
    LimitMeasure,
    bernoulli_potential,
    check_contraction,
    check_conjugacy,
    check_injectivity,
    check_invariance,
    check_sosc,
    limit_measure,
    lyapunov,
    make_gdms,
    power_law_fit,
)
from .hitting import (
    IntervalAdapter,
    LimitSetAdapter,
    RateEstimates,
    ShiftAdapter,
    SystemAdapter,
    build_certificate,
    divergence_scan,
    entry_table,
    entry_table_cylinder,
    entry_time,
    rate_estimates,
    record_sequence,
    waiting_tail,
)
from .induction import (
    InducedSystem,
    MarkovBase,
    build_local_ifs,
    check_return_sums,
    compare_hitting_statistics,
    induce,
    kac_check,
    make_region,
    record_equivalence,
    region_from_intervals,
    return_time_spectrum,
    sample_base_codes,
    sandwich_check,
)
from .symbolic import (
    IncidenceStructure,
    UltrametricSpec,
    admissible_array,
    cylinder_hits,
    format_word,
    load_incidence,
)
from .thermo import (
    GibbsState,
    LocallyConstantPotential,
    birkhoff_sum_bounds,
    free_energy,
    gibbs_state,
    make_potential,
    pressure,
    seed_stream,
    verify_gibbs_property,
)

logger = logging.getLogger(__name__)

SHIFT_SYSTEMS = ("full", "golden-mean", "custom")
SYSTEMS = {"shift": SHIFT_SYSTEMS, "interval": BUILTIN_MAPS, "gdms": (*BUILTIN_SYSTEMS, "custom")}
POTENTIALS = ("zero", "bernoulli", "markov_depth1", "gauss_t", "geometric")

SYSTEM_PARAMS = {
    "shift": {"full": ["size"], "golden-mean": [], "custom": ["matrix", "path"], "*": ["alpha", "max_depth"]},
    "interval": {"doubling": ["circle"], "ternary": ["circle"], "markov2": ["table"], "gauss": ["truncation"]},
    "gdms": {
        "cantor3": [],
        "interval2": [],
        "gauss-cf": ["truncation"],
        "custom": ["name", "vertices", "seeds", "edges", "contraction", "level", "incidence"],
    },
}
POTENTIAL_PARAMS = {"zero": [], "bernoulli": ["p"], "markov_depth1": ["table"], "gauss_t": ["t"], "geometric": ["t"]}

Progress = Optional[Callable[[int], None]]


def build_incidence(config: ExperimentConfig) -> IncidenceStructure:
    params = config.system_params
    if config.system == "full":
        return IncidenceStructure.full(int(params.get("size", 2)))
    if config.system == "golden-mean":
        return IncidenceStructure.golden_mean()
    if "path" in params:
        return load_incidence(Path(params["path"]))
    if "matrix" in params:
        return IncidenceStructure(np.array(params["matrix"]))
    raise ConfigError("a custom shift needs system.params.matrix or system.params.path")


def build_state(config: ExperimentConfig) -> GibbsState:
    if config.system_kind == "shift":
        incidence = build_incidence(config)
    elif config.system_kind == "interval":
        incidence = make_map(config.system, config.system_params).incidence
    else:
        raise ConfigError(f"experiment '{config.kind}' needs a shift or interval system")
    try:
        f = make_potential(config.potential, config.potential_params, incidence.alphabet_size)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"potential '{config.potential}': {e}") from e
    return gibbs_state(f, incidence)


def edge_potential(config: ExperimentConfig) -> EdgePotential:
    if config.potential == "geometric":
        return EdgePotential(float(config.potential_params.get("t", 1.0)))
    if config.potential == "bernoulli":
        return bernoulli_potential(config.potential_params["p"])
    if config.potential == "zero":
        return EdgePotential()
    raise ConfigError(f"potential '{config.potential}' is not defined on GDMS edges")


def build_limit(config: ExperimentConfig) -> LimitMeasure:
    if config.system_kind != "gdms":
        raise ConfigError(f"experiment '{config.kind}' needs a gdms system")
    return limit_measure(make_gdms(config.system, config.system_params), edge_potential(config), config.nodes)


def build_adapter(config: ExperimentConfig) -> SystemAdapter:
    if config.system_kind == "gdms":
        return LimitSetAdapter(build_limit(config))
    state = build_state(config)
    if config.system_kind == "interval":
        return IntervalAdapter(make_map(config.system, config.system_params), state)
    metric = UltrametricSpec(float(config.system_params.get("alpha", 1.0)))
    return ShiftAdapter(state, metric, int(config.system_params.get("max_depth", 64)))


def _words(raw: list) -> list[tuple[int, ...]]:
    """Config words are 1-based."""
    return [tuple(int(s) - 1 for s in word) for word in raw]


def _build_induced(config: ExperimentConfig) -> InducedSystem:
    state = build_state(config)
    tmap = make_map(config.system, config.system_params) if config.system_kind == "interval" else None
    if tmap is not None and not isinstance(tmap, AffineMarkovMap):
        raise ConfigError(f"map '{config.system}' has no exact affine cells to induce on")
    base = MarkovBase(state, tmap)
    params = config.params
    if params.get("words"):
        region = make_region(_words(params["words"]), base)
    else:
        region = region_from_intervals(base, [tuple(pair) for pair in params["region"]])
    return induce(base, region)


COLUMNS = {
    "pressure.csv": {"depth": "partition-sum depth n", "truncated": "(1/n) log Z_n(f)"},
    "cylinders.csv": {
        "depth": "cylinder depth n",
        "word": "1-based word",
        "mass": "mu_f([word])",
        "ratio_low": "mu / exp(sup S_n f - nP)",
        "ratio_high": "mu / exp(inf S_n f - nP)",
    },
    "records.csv": {"pair_id": "pair index", "k": "record index", "n_k": "record time", "r_k": "record distance"},
    "entry.csv": {
        "pair_id": "pair index",
        "r": "radius",
        "tau": "entry time into B(y, r) (blank when censored)",
        "mu_ball": "mu(B(y, r))",
        "E_r": "tau * mu_ball",
        "running_max": "running maximum of E_r over rows",
    },
    "rates.csv": {
        "pair_id": "pair index",
        "n_records": "records with r > 0",
        "hitting": "slope of log tau against -log r",
        "hitting_lower": "min window slope",
        "hitting_upper": "max window slope",
        "dimension": "slope of log mu(B) against log r",
        "dimension_lower": "min window slope",
        "dimension_upper": "max window slope",
    },
    "waiting_tail.csv": {
        "k": "grid point",
        "a": "P(tau_B <= k)",
        "a_se": "binomial standard error of a",
        "q": "P(tau_R <= k)",
        "q_se": "binomial standard error of q",
        "k_mu_R": "k * mu(R_r)",
        "independence": "1 - (1 - mu(B))^k",
        "exact": "exact P(tau_B <= k) (blank when unavailable)",
    },
    "certificate.csv": {
        "i": "stage",
        "r_i": "radius",
        "k_i": "2 M / mu(R_{r_i})",
        "mu_R_i": "mu(R_{r_i})",
        "mu_B_i": "mu(B_{r_i})",
        "growth_slack": "k_i - 2 (s + k_{i-1})",
        "mass_slack": "delta / (2 Omega (k_{i-1} + s)) - mu(R_{r_i})",
    },
    "spectrum.csv": {"n": "return time", "mass": "mu_hat(t = n)"},
    "ifs.csv": {
        "return_time": "n",
        "word": "1-based domain word",
        "mass": "mu(A)",
        "conditional_mass": "mu_hat(A)",
        "contraction": "Lip of the inverse branch",
        "onto": "T^n maps A onto the base set",
    },
    "compare.csv": {
        "pair_id": "pair index",
        "r": "record radius",
        "tau": "base entry time",
        "tau_hat": "induced entry time",
        "mu_ball": "mu(B)",
        "mu_hat_ball": "mu(B) / mu(X_hat)",
        "E": "tau * mu(B)",
        "E_hat": "tau_hat * mu_hat(B)",
        "ratio": "E / E_hat",
        "identity": "A_{tau_hat} = tau",
        "settled": "tau_hat >= min_returns; only these rows enter ratio_near_one",
    },
    "powerlaw.csv": {"r": "radius", "mass": "mu_hat(B(y, r))", "residual": "log mu_hat - log(C r^alpha), <= 0"},
    "divergence.csv": {
        "horizon": "orbit horizon",
        "median_max": "median over pairs of max_k n_k mu(B(y, r_k))",
        "median_min": "median over pairs of min_{k>=3} n_k mu(B(y, r_k))",
    },
    "cover.csv": {
        "y": "center",
        "k": "r = 2^-k",
        "depth": "n(r)",
        "lo": "left end of R_r",
        "hi": "right end of R_r",
        "order": "ord(R_r)",
        "mass": "mu(R_r)",
        "ball_mass": "mu(B(y, r))",
        "contains_ball": "B(y, r) inside R_r",
        "inside_enlarged": "R_r inside B(y, r + r^2)",
    },
    "orbit.csv": {"n": "time step", "x_n": "T^n(x_0)"},
    "measure.csv": {"word": "1-based word", "mass": "mu_hat([word])", "expected": "reference value"},
}


def _document(report: Report, *names: str) -> None:
    for name in names:
        report.document(name, COLUMNS[name])


def run_pressure(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "pressure.csv")
    params = config.params
    state = build_state(config)
    f = make_potential(config.potential, config.potential_params, state.alphabet_size)
    truncated = pressure(f, state.incidence, int(params["depth"]), "truncated-limit")
    write_csv(out_dir / "pressure.csv", ["depth", "truncated"], enumerate(truncated.partial, start=1))
    value = state.pressure
    report.info("pressure", P=value, method=state.method, truncated=truncated.value, depth=truncated.depth)
    if params.get("expected") is not None:
        report.check("expected", abs(value - params["expected"]) <= params["tolerance"], P=value, expected=params["expected"])
    if isinstance(f, LocallyConstantPotential):
        equilibrium = free_energy(f, state.incidence, state.kernel)
        report.check("variational_equilibrium", abs(equilibrium - value) <= 1e-9, free_energy=equilibrium, P=value)
        allowed = state.incidence.matrix.astype(float)
        uniform = allowed / allowed.sum(axis=1, keepdims=True)
        competitor = free_energy(f, state.incidence, uniform)
        report.check("variational_bound", competitor <= value + 1e-12, free_energy=competitor, P=value)
    return report


def run_gibbs_audit(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "cylinders.csv")
    depth = int(config.params["depth"])
    state = build_state(config)
    audit = verify_gibbs_property(state, depth)
    q = audit.gibbs_constant
    report.check(
        "gibbs_ratio",
        audit.passed,
        Q=q,
        max_ratio=audit.max_ratio,
        min_ratio=audit.min_ratio,
        worst_ratio=audit.worst_ratio,
        attaining_cylinder=format_word(audit.attaining_cylinder),
    )
    report.check("additivity", audit.additivity_error <= 1e-12, error=audit.additivity_error)
    report.check("normalization", audit.normalization_error <= 1e-12, error=audit.normalization_error)
    report.check("decay", audit.decay_ok, beta=state.decay)
    if config.potential == "bernoulli":
        p = np.asarray(config.potential_params["p"], dtype=float)
        worst = 0.0
        for n in range(1, depth + 1):
            words = admissible_array(state.incidence, n)
            worst = max(worst, float(np.abs(state.cylinder_masses(words) - np.prod(p[words], axis=1)).max()))
        report.check("bernoulli_exact", worst <= 1e-12, max_error=worst)

    rows = []
    for n in range(1, min(depth, int(config.params["csv_depth"])) + 1):
        for word in admissible_array(state.incidence, n):
            word = tuple(int(s) for s in word)
            mass = state.cylinder(word)
            low, high = birkhoff_sum_bounds(state.potential, word, state.incidence)
            rows.append([n, format_word(word), mass, mass / math.exp(high - n * state.pressure), mass / math.exp(low - n * state.pressure)])
    write_csv(out_dir / "cylinders.csv", list(COLUMNS["cylinders.csv"]), rows)
    return report


def _record_task(payload: tuple) -> tuple:
    adapter, pair_id, seed, horizon, diagonal, n_checks = payload
    rng = seed_stream(seed, pair_id)
    orbit = adapter.sample_orbit(rng, horizon + 1)
    target = adapter.target_of(orbit) if diagonal else adapter.sample_target(rng)
    records = record_sequence(adapter, orbit, target, horizon)
    distances = adapter.distances(orbit, target)[: horizon + 1]
    agree = 0
    for _ in range(n_checks):
        k = int(rng.integers(0, len(records)))
        # tau(r) = n_k on (r_k, r_{k-1}], with r_{-1} taken as r_0 + 1
        low = float(records.radii[k])
        high = float(records.radii[k - 1]) if k else low + 1.0
        r = float(rng.uniform(low, high))
        if r <= low:
            r = high
        agree += entry_time(distances, r) == records.tau(r) == int(records.times[k])
    return records, agree


def run_records(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "records.csv")
    adapter = build_adapter(config)
    horizon = max(config.horizons)
    n_checks = int(config.params["duality_checks"])
    payloads = [(adapter, i, config.seed, horizon, bool(config.params["diagonal"]), n_checks) for i in range(config.pairs)]
    results = run_tasks(_record_task, payloads, workers, progress)
    write_csv(
        out_dir / "records.csv",
        list(COLUMNS["records.csv"]),
        (row for i, (records, _) in enumerate(results) for row in records.rows(i)),
    )
    agree = sum(a for _, a in results)
    report.check("record_tau_duality", agree == n_checks * len(results), agreeing=agree, checks=n_checks * len(results))
    ordered = all(
        bool(np.all(np.diff(r.times) > 0) and np.all(np.diff(r.radii) < 0)) for r, _ in results
    )
    report.check("records_monotone", ordered, pairs=len(results))
    report.info(
        "records",
        median_count=float(np.median([len(r) for r, _ in results])),
        terminal=sum(r.terminal for r, _ in results),
    )
    return report


def _entry_task(payload: tuple) -> tuple:
    adapter, pair_id, seed, horizon, params = payload
    rng = seed_stream(seed, pair_id)
    orbit = adapter.sample_orbit(rng, horizon + 1)
    target = adapter.sample_target(rng)
    if params["mode"] == "cylinder":
        depth = int(params["depth"])
        table = entry_table_cylinder(orbit.codes, target.code, adapter.state, depth, horizon)
        brute = []
        for n in range(1, depth + 1):
            hits = cylinder_hits(orbit.codes[None, 1:], tuple(int(s) for s in target.code[:n]), horizon)[0]
            brute.append(int(hits.argmax()) + 1 if hits.any() else 0)
        exact = bool(np.array_equal(np.where(table.censored, 0, table.taus), brute))
        return table, exact
    records = record_sequence(adapter, orbit, target, horizon)
    table = entry_table(records, lambda r: adapter.ball_mass(target, r), params.get("radii"), adapter.resolution)
    return table, True


def run_entry(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "entry.csv")
    adapter = build_adapter(config)
    if config.params["mode"] == "cylinder" and not isinstance(adapter, ShiftAdapter):
        raise ConfigError("cylinder mode needs a shift system")
    horizon = max(config.horizons)
    payloads = [(adapter, i, config.seed, horizon, config.params) for i in range(config.pairs)]
    results = run_tasks(_entry_task, payloads, workers, progress)
    write_csv(
        out_dir / "entry.csv",
        list(COLUMNS["entry.csv"]),
        (row for i, (table, _) in enumerate(results) for row in table.rows(i)),
    )
    monotone = all(bool(np.all(np.diff(t.running_max) >= 0)) for t, _ in results)
    report.check("running_max_nondecreasing", monotone, pairs=len(results))
    coupling = all(bool(np.all(np.diff(t.taus[~t.censored]) >= 0)) for t, _ in results)
    report.check("monotone_coupling", coupling)
    if config.params["mode"] == "cylinder":
        report.check("cylinder_exactness", all(ok for _, ok in results))
    report.info(
        "entry",
        censored_rows=int(sum(t.censored.sum() for t, _ in results)),
        unresolved_rows=int(sum(t.unresolved.sum() for t, _ in results)),
    )
    return report


def _rates_task(payload: tuple) -> Optional[RateEstimates]:
    adapter, pair_id, seed, horizon = payload
    rng = seed_stream(seed, pair_id)
    orbit = adapter.sample_orbit(rng, horizon + 1)
    target = adapter.sample_target(rng)
    records = record_sequence(adapter, orbit, target, horizon)
    try:
        return rate_estimates(records, lambda r: adapter.ball_mass(target, r))
    except ValueError:
        return None


def run_rates(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "rates.csv")
    adapter = build_adapter(config)
    payloads = [(adapter, i, config.seed, max(config.horizons)) for i in range(config.pairs)]
    results = run_tasks(_rates_task, payloads, workers, progress)
    estimates = [(i, e) for i, e in enumerate(results) if e is not None]
    write_csv(
        out_dir / "rates.csv",
        list(COLUMNS["rates.csv"]),
        (
            [i, e.n_records, e.hitting, e.hitting_lower, e.hitting_upper, e.dimension, e.dimension_lower, e.dimension_upper]
            for i, e in estimates
        ),
    )
    if not estimates:
        report.check("enough_records", False, usable_pairs=0)
        return report
    ordered = all(e.hitting_lower <= e.hitting_upper and e.dimension_lower <= e.dimension_upper for _, e in estimates)
    report.check("envelopes_ordered", ordered, usable_pairs=len(estimates), skipped=len(results) - len(estimates))
    dimension = float(np.median([e.dimension for _, e in estimates]))
    hitting = float(np.median([e.hitting for _, e in estimates]))
    report.info("rates", median_dimension=dimension, median_hitting=hitting)
    expected = config.params.get("expected_dimension")
    if expected is not None:
        tolerance = float(config.params["rel_tol"])
        report.check("dimension", abs(dimension - expected) <= tolerance * expected, median=dimension, expected=expected)
    return report


def run_waiting_tail(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "waiting_tail.csv")
    params = config.params
    adapter = build_adapter(config)
    target = adapter.sample_target(seed_stream(config.seed, 1))
    if isinstance(adapter, ShiftAdapter):
        r = math.exp(-adapter.metric.alpha * (int(params["depth"]) - 0.5))
    else:
        r = float(params["radius"])
    tail = waiting_tail(adapter, target, r, params["k_grid"], config.n_samples, config.seed)
    write_csv(
        out_dir / "waiting_tail.csv",
        list(COLUMNS["waiting_tail.csv"]),
        (
            [int(k), float(a), float(ase), float(q), float(qse), float(k * tail.cover_mass), float(ind), float(ex) if tail.exact is not None else ""]
            for k, a, ase, q, qse, ind, ex in zip(
                tail.k_grid,
                tail.a,
                tail.a_stderr,
                tail.q,
                tail.q_stderr,
                tail.independence,
                tail.exact if tail.exact is not None else tail.k_grid,
            )
        ),
    )
    report.info("target", r=r, mu_ball=tail.ball_mass, mu_cover=tail.cover_mass, n_samples=tail.n_samples)
    report.check("q_bound", tail.bound_holds)
    report.check("a_below_q", tail.ordered)
    report.check("monotone_in_k", tail.monotone)
    report.check("measure_preservation", tail.window_z <= 5.0, max_z=tail.window_z)
    report.info("independence_oracle", max_z=float(tail.z_scores(tail.independence).max()))
    if tail.exact is not None:
        z = float(tail.z_scores(tail.exact).max())
        report.check("exact_oracle", z <= 4.0, max_z=z)
    return report


def run_certificate(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "certificate.csv")
    params = config.params
    adapter = build_adapter(config)
    report.note("verdicts are conditional on the fitted mixing constants C, D, gamma")
    try:
        certificate = build_certificate(
            adapter,
            float(params["M"]),
            float(params["delta"]),
            config.n_samples,
            config.seed,
            r0=params.get("r0"),
            max_stages=int(params["max_stages"]),
        )
    except LadderInfeasibleError as e:
        report.check("ladder_feasible", False, stage=e.stage, binding_constraint=e.constraint)
        write_csv(out_dir / "certificate.csv", list(COLUMNS["certificate.csv"]), [])
        return report
    write_csv(out_dir / "certificate.csv", list(COLUMNS["certificate.csv"]), certificate.rows())
    fit = certificate.fit
    report.info(
        "constants", M=certificate.M, C=fit.C, D=fit.D, gamma=fit.gamma, Gamma=certificate.Gamma, s=certificate.s, W=certificate.W
    )
    slacks_ok = all(r.growth_slack >= 0 and r.mass_slack >= 0 for r in certificate.ladder[1:])
    report.check("ladder_inequalities", slacks_ok, Omega=certificate.omega, stages=len(certificate.ladder))
    report.check(
        "bad_set_mass",
        certificate.verdict,
        estimate=certificate.estimate,
        stderr=certificate.stderr,
        delta=certificate.delta,
        n_samples=certificate.n_samples,
    )
    return report


def run_kac(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "spectrum.csv", "ifs.csv")
    params = config.params
    induced = _build_induced(config)
    result = kac_check(induced, config.n_samples, config.seed, int(params["horizon"]))
    report.check(
        "kac_identity", result.z <= 4.0, mean=result.mean, target=result.target, stderr=result.stderr, z=result.z
    )
    if params.get("tolerance") is not None:
        report.check("kac_tolerance", abs(result.mean - result.target) <= params["tolerance"], tolerance=params["tolerance"])
    report.check("censoring", result.censored_fraction <= 0.01, fraction=result.censored_fraction)
    n_points = int(params["return_sum_points"])
    if n_points > 0 and induced.base.tmap is not None:
        rng = seed_stream(config.seed, 1)
        intervals = induced.region.intervals(induced.base.tmap)
        grid = 2**20 + 1
        points = []
        for _ in range(n_points):
            lo, hi = intervals[int(rng.integers(0, len(intervals)))]
            points.append(lo + (hi - lo) * Fraction(int(rng.integers(0, grid)), grid))
        sums = check_return_sums(induced, points, int(params["return_sum_steps"]), min(int(params["horizon"]), 1_000))
        report.check("return_sums", sums.holds, points=sums.points, steps=sums.steps, censored=sums.censored)
    spectrum = return_time_spectrum(induced, int(params["max_n"]))
    write_csv(out_dir / "spectrum.csv", ["n", "mass"], ([n, float(m)] for n, m in enumerate(spectrum.masses, start=1)))
    report.check("spectrum_total", spectrum.total <= 1 + 1e-12, total=spectrum.total, mean=spectrum.mean, tail=spectrum.tail)
    ifs = build_local_ifs(induced, int(params["max_return"]))
    write_csv(
        out_dir / "ifs.csv",
        list(COLUMNS["ifs.csv"]),
        ([b.return_time, format_word(b.word), b.mass, b.conditional_mass, b.contraction, b.onto] for b in ifs.branches),
    )
    report.check(
        "local_ifs",
        all(b.onto for b in ifs.branches) and ifs.contraction < 1,
        branches=len(ifs.branches),
        contraction=ifs.contraction,
        uncovered=ifs.uncovered,
    )
    return report


def _compare_task(payload: tuple) -> tuple:
    induced, pair_id, seed, horizon, y, r_max = payload
    rng = seed_stream(seed, pair_id)
    codes = sample_base_codes(induced, rng, horizon)
    comparison = compare_hitting_statistics(induced, y, codes, horizon, r_max)
    return comparison, sandwich_check(comparison), record_equivalence(induced, y, codes, horizon)


def run_induce_compare(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "compare.csv")
    params = config.params
    induced = _build_induced(config)
    y = Fraction(str(params["y"]))
    min_returns = int(params["min_returns"])
    payloads = [(induced, i, config.seed, max(config.horizons), y, float(params["r_max"])) for i in range(config.pairs)]
    results = run_tasks(_compare_task, payloads, workers, progress)
    write_csv(
        out_dir / "compare.csv",
        list(COLUMNS["compare.csv"]),
        (row for i, (c, _, _) in enumerate(results) for row in c.rows(i, min_returns)),
    )
    tolerance = float(params["tolerance"])
    within = []
    for c, _, _ in results:
        settled = c.settled(min_returns)
        # pairs without a settled row are left out of the fraction
        if settled.any():
            within.append(bool(np.all(np.abs(c.ratios[settled] - 1) <= tolerance)))
    fraction = sum(within) / len(within) if within else 0.0
    report.check("bookkeeping_identity", all(bool(np.all(c.identity)) for c, _, _ in results))
    report.check("sandwich", all(s for _, s, _ in results))
    report.check("record_equivalence", all(e for _, _, e in results))
    report.info(
        "settled_rows",
        min_returns=min_returns,
        settled=int(sum(c.settled(min_returns).sum() for c, _, _ in results)),
        total=int(sum(c.radii.size for c, _, _ in results)),
    )
    report.check(
        "ratio_near_one",
        fraction >= float(params["fraction"]),
        fraction=fraction,
        settled_pairs=len(within),
        tolerance=tolerance,
    )
    return report


def run_gdms_powerlaw(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "powerlaw.csv")
    params = config.params
    measure = build_limit(config)
    system = measure.system
    contraction = check_contraction(system)
    report.check("contraction", contraction.holds, sup_derivative=contraction.sup_derivative, s=system.contraction)
    sosc = check_sosc(system)
    report.info("open_set_condition", osc=sosc.osc, sosc=sosc.sosc)
    y = params.get("y")
    if y is None:
        y = float(ChaosGame(measure, seed_stream(config.seed, 0)).points(1)[0])
    radii = np.geomspace(float(params["r_min"]), float(params["r_max"]), int(params["n_radii"]))
    fit = power_law_fit(measure, float(y), radii)
    write_csv(
        out_dir / "powerlaw.csv",
        ["r", "mass", "residual"],
        ([float(r), float(m), float(e)] for r, m, e in zip(fit.radii, fit.masses, fit.residuals)),
    )
    report.info("fit", y=float(y), C=fit.C, alpha=fit.alpha, stderr=fit.alpha_stderr)
    report.check("alpha_floor", fit.exceeds_floor, alpha=fit.alpha, alpha_theory=fit.alpha_theory)
    expected = params.get("expected_alpha")
    if expected is not None:
        tolerance = float(params["rel_tol"])
        report.check("alpha_expected", abs(fit.alpha - expected) <= tolerance * expected, expected=expected)
    return report


def run_divergence(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "records.csv", "entry.csv", "divergence.csv")
    adapter = build_adapter(config)
    scan = divergence_scan(
        adapter, config.pairs, config.horizons, config.seed, workers, bool(config.params["diagonal"]), progress
    )
    write_csv(
        out_dir / "records.csv",
        list(COLUMNS["records.csv"]),
        (row for pair in scan.pairs for row in pair.records.rows(pair.pair_id)),
    )
    write_csv(out_dir / "entry.csv", list(COLUMNS["entry.csv"]), (row for pair in scan.pairs for row in pair.entry_rows()))
    write_csv(
        out_dir / "divergence.csv",
        list(COLUMNS["divergence.csv"]),
        zip(scan.horizons, scan.median_max, scan.median_min),
    )
    report.check("running_max_nondecreasing", scan.monotone_fraction == 1.0, fraction=scan.monotone_fraction)
    report.check("median_trend", scan.trend, medians=" ".join(repr(m) for m in scan.median_max))
    smallness = scan.median_min[-1]
    report.check("liminf_smallness", smallness <= float(config.params["small"]), median_min=smallness)
    report.info("pairs", total=len(scan.pairs), excluded=scan.excluded)
    return report


def run_orbit(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "orbit.csv")
    params = config.params
    adapter = build_adapter(config)
    if not isinstance(adapter, IntervalAdapter):
        raise ConfigError("orbit needs an interval system")
    length = int(params["length"])
    if params.get("x0") is not None:
        x0 = Fraction(str(params["x0"]))
        if not 0 <= x0 < 1:
            raise ConfigError(f"x0 = {x0} lies outside [0, 1)")
        orbit = adapter.orbit_of(x0, length)
        report.info("start", x0=str(x0), exact=True)
    else:
        orbit = adapter.sample_orbit(seed_stream(config.seed, 0), length)
        report.info("start", x0=float(orbit.points[0]), exact=False)
    points = orbit.points
    write_csv(out_dir / "orbit.csv", list(COLUMNS["orbit.csv"]), enumerate(points.tolist()))
    report.check("in_unit_interval", bool(np.all((points >= 0) & (points < 1))), length=length)
    stepped = np.array([float(adapter.tmap.apply(float(x))) for x in points[:-1]])
    error = float(distance(stepped - points[1:], 0.0, circle=True).max()) if length > 1 else 0.0
    report.check("one_step", error <= 1e-9, max_error=error)
    return report


def run_markov_cover(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "cover.csv")
    params = config.params
    adapter = build_adapter(config)
    if not isinstance(adapter, IntervalAdapter):
        raise ConfigError("markov-cover needs an interval system")
    n_points = int(params["n_points"])
    ys = seed_stream(config.seed, 0).uniform(0.0, 1.0, size=n_points)
    ks = range(int(params["k_min"]), int(params["k_max"]) + 1)
    rows, contains, inside, bounded, envelope_ok, decreasing = [], 0, 0, 0, 0, 0
    first = int(params["decreasing_from"])
    for y in ys:
        products, envelope = [], []
        for k in ks:
            r = 2.0**-k
            cover = markov_cover(adapter.tmap, adapter.measure, float(y), r)
            contains += cover.contains_ball
            inside += cover.inside_enlarged_ball
            bounded += cover.order <= cover.depth
            if k >= first:
                products.append(cover.order * cover.ball_mass)
                envelope.append(cover.depth * cover.ball_mass)
            rows.append([
                float(y),
                k,
                cover.depth,
                float(cover.lo),
                float(cover.hi),
                cover.order,
                cover.mass,
                cover.ball_mass,
                cover.contains_ball,
                cover.inside_enlarged_ball,
            ])
        envelope_ok += all(a > b for a, b in itertools.pairwise(envelope))
        decreasing += all(a > b for a, b in itertools.pairwise(products))
    write_csv(out_dir / "cover.csv", list(COLUMNS["cover.csv"]), rows)
    total = n_points * len(ks)
    report.check("ball_inside_cover", contains == total, cases=total, holding=contains)
    report.check("cover_inside_enlarged_ball", inside == total, cases=total, holding=inside)
    report.check("order_below_depth", bounded == total, cases=total, holding=bounded)
    report.check("order_mass_decreasing", decreasing == n_points, points=n_points, holding=decreasing)
    report.info("depth_mass_decreasing", points=n_points, holding=envelope_ok)
    good = good_radius_density(adapter.measure, float(ys[0]), 2.0 ** -int(params["k_max"]), 2.0 ** -int(params["k_min"]), 100)
    report.info("good_radii", y=float(ys[0]), density=good.density)
    return report


def run_gdms_measure(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    _document(report, "measure.csv")
    params = config.params
    measure = build_limit(config)
    report.info("transfer_operator", pressure=measure.pressure, entropy=measure.entropy, lyapunov=measure.lyapunov)
    if params.get("expected_pressure") is not None:
        report.check(
            "pressure",
            abs(measure.pressure - params["expected_pressure"]) <= float(params["tolerance"]),
            P=measure.pressure,
            expected=params["expected_pressure"],
        )
    words = _words(params["words"])
    expected = list(params.get("expected") or [])
    rows = []
    for i, word in enumerate(words):
        mass = measure.cylinder(word)
        reference = expected[i] if i < len(expected) else None
        rows.append([format_word(word), mass, reference if reference is not None else ""])
        if reference is not None:
            report.check(
                f"cylinder {format_word(word)}",
                abs(mass - reference) <= float(params["tolerance"]),
                mass=mass,
                expected=reference,
            )
    write_csv(out_dir / "measure.csv", list(COLUMNS["measure.csv"]), rows)
    if int(params["invariance_samples"]) > 0:
        centers = np.linspace(0.1, 0.9, 9)
        invariance = check_invariance(measure, centers, 0.05, int(params["invariance_samples"]), config.seed)
        report.check("invariance", invariance.max_z <= 5.0, max_z=invariance.max_z)
    n_codes = int(params["code_samples"])
    if n_codes > 0:
        conjugacy = check_conjugacy(measure, n_codes, config.seed)
        report.check(
            "conjugacy",
            conjugacy.holds,
            samples=conjugacy.samples,
            max_error=conjugacy.max_error,
            max_excess=conjugacy.max_excess,
            outside=conjugacy.outside,
        )
        injectivity = check_injectivity(measure, n_codes, config.seed)
        values = {
            "distinct_codes": injectivity.distinct_codes,
            "overlaps": injectivity.overlaps,
            "collisions": injectivity.collisions,
        }
        # only the good set of an SOSC system is coded one to one
        if check_sosc(measure.system).sosc:
            report.check("injectivity", injectivity.holds, **values)
        else:
            report.info("injectivity", **values)
    return report


def run_lyapunov(config: ExperimentConfig, out_dir: Path, workers: int, progress: Progress) -> Report:
    report = Report(config.kind, config.seed)
    measure = build_limit(config)
    estimate = lyapunov(measure, int(config.params["sample_length"]), config.seed)
    report.info("lyapunov", chi=estimate.value, stderr=estimate.stderr, collocation=measure.lyapunov)
    expected = config.params.get("expected")
    if expected is not None:
        tolerance = float(config.params["rel_tol"])
        report.check("lyapunov_expected", abs(estimate.value - expected) <= tolerance * expected, expected=expected)
    return report


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    defaults: dict
    runner: Callable[[ExperimentConfig, Path, int, Progress], Report]
    system: dict


def _system(kind: str, name: str, potential: str = "zero", **params: Any) -> dict:
    config: dict = {"system": {"kind": kind, "name": name}, "measure": {"potential": potential}}
    system_params = params.pop("system_params", None)
    if system_params:
        config["system"]["params"] = system_params
    if params:
        config["measure"]["params"] = params
    return config


BERNOULLI_HALF = _system("shift", "full", "bernoulli", p=[0.5, 0.5])

EXPERIMENTS: dict[str, Experiment] = {
    e.name: e
    for e in (
        Experiment(
            "pressure",
            "topological pressure, spectral and truncated, with the variational principle",
            {"depth": 12, "expected": None, "tolerance": 1e-10},
            run_pressure,
            _system("shift", "golden-mean"),
        ),
        Experiment(
            "gibbs-audit",
            "Gibbs-ratio audit over all cylinders up to a depth",
            {"depth": 12, "csv_depth": 6},
            run_gibbs_audit,
            _system("shift", "full", "bernoulli", p=[0.3, 0.7]),
        ),
        Experiment(
            "records",
            "closest-approach records and the record/tau duality",
            {"diagonal": False, "duality_checks": 100},
            run_records,
            BERNOULLI_HALF,
        ),
        Experiment(
            "entry",
            "entry statistics E_r at record radii, a radius schedule or cylinder depths",
            {"mode": "radius", "radii": None, "depth": 20},
            run_entry,
            BERNOULLI_HALF,
        ),
        Experiment(
            "rates",
            "hitting rates and pointwise dimension from records",
            {"expected_dimension": None, "rel_tol": 0.1},
            run_rates,
            BERNOULLI_HALF,
        ),
        Experiment(
            "waiting-tail",
            "a_r^(k) and q_r^(k) with the bound q <= k mu(R)",
            {"depth": 5, "radius": 0.01, "k_grid": [0, 1, 2, 4, 8, 16, 32, 64]},
            run_waiting_tail,
            BERNOULLI_HALF,
        ),
        Experiment(
            "certificate",
            "radius ladder and Monte Carlo bad-set mass of the divergence argument",
            {"M": 0.05, "delta": 0.2, "r0": None, "max_stages": 1000},
            run_certificate,
            BERNOULLI_HALF,
        ),
        Experiment(
            "kac",
            "Kac's identity, the return-time spectrum and the local IFS of a first-return map",
            {
                "region": [[0.0, 0.5]],
                "words": None,
                "horizon": 100_000,
                "tolerance": None,
                "max_n": 64,
                "max_return": 12,
                "return_sum_points": 20,
                "return_sum_steps": 10,
            },
            run_kac,
            _system("interval", "doubling"),
        ),
        Experiment(
            "induce-compare",
            "entry statistics of a system against those of its first-return map",
            {
                "region": [[0.0, 0.5]],
                "words": None,
                "y": 0.25,
                "r_max": 2.0**-12,
                "min_returns": 2_000,
                "tolerance": 0.05,
                "fraction": 0.95,
            },
            run_induce_compare,
            _system("interval", "doubling"),
        ),
        Experiment(
            "gdms-powerlaw",
            "power law of ball measures on a GDMS limit set",
            {"y": None, "r_min": 1e-4, "r_max": 0.1, "n_radii": 12, "expected_alpha": None, "rel_tol": 0.05},
            run_gdms_powerlaw,
            _system("gdms", "cantor3", "bernoulli", p=[0.5, 0.5]),
        ),
        Experiment(
            "divergence",
            "running extrema of n_k mu(B(y, r_k)) across horizons",
            {"diagonal": False, "small": 0.5},
            run_divergence,
            BERNOULLI_HALF,
        ),
        Experiment(
            "orbit",
            "an orbit x_n = T^n(x_0), exact from a rational x_0 or sampled from the Gibbs state",
            {"x0": None, "length": 1_000},
            run_orbit,
            _system("interval", "doubling"),
        ),
        Experiment(
            "markov-cover",
            "Markov covers R_r of balls on a grid of centers and radii",
            {"n_points": 100, "k_min": 3, "k_max": 20, "decreasing_from": 8},
            run_markov_cover,
            _system("interval", "doubling"),
        ),
        Experiment(
            "gdms-measure",
            "cylinder masses and invariance of a projected Gibbs state",
            {
                "words": [[1]],
                "expected": [math.log2(4 / 3)],
                "tolerance": 1e-3,
                "expected_pressure": 0.0,
                "invariance_samples": 100_000,
                "code_samples": 500,
            },
            run_gdms_measure,
            _system("gdms", "gauss-cf", "geometric", t=1.0),
        ),
        Experiment(
            "lyapunov",
            "Lyapunov exponent by Birkhoff averages along coded orbits",
            {"sample_length": 1_000_000, "expected": None, "rel_tol": 0.01},
            run_lyapunov,
            _system("gdms", "gauss-cf", "geometric", t=1.0),
        ),
    )
}

# reference values wired into the default configs
DEFAULT_OVERRIDES: dict[str, dict] = {
    "pressure": {"experiment": {"expected": math.log((1 + math.sqrt(5)) / 2)}},
    "rates": {"experiment": {"expected_dimension": math.log(2)}, "sampling": {"pairs": 20, "horizons": [1_000_000]}},
    "records": {"sampling": {"pairs": 10, "horizons": [10_000]}},
    "entry": {"sampling": {"pairs": 10, "horizons": [100_000]}},
    "kac": {"experiment": {"tolerance": 0.01}, "sampling": {"n_samples": 1_000_000}},
    "induce-compare": {"sampling": {"pairs": 50, "horizons": [1_000_000]}},
    "gdms-powerlaw": {"experiment": {"expected_alpha": math.log(2) / math.log(3)}},
    "divergence": {"sampling": {"pairs": 100, "horizons": [10_000, 10_000_000]}},
    "lyapunov": {"experiment": {"expected": math.pi**2 / (6 * math.log(2))}},
}


def default_config(kind: str, seed: int = 0) -> dict:
    """A complete raw config for ``kind`` with its reference system."""
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{kind}'")
    experiment = EXPERIMENTS[kind]
    overrides = DEFAULT_OVERRIDES.get(kind, {})
    params = {k: v for k, v in {**experiment.defaults, **overrides.get("experiment", {})}.items() if v is not None}
    config = {
        "system": copy.deepcopy(experiment.system["system"]),
        "measure": copy.deepcopy(experiment.system["measure"]),
        "experiment": {"kind": kind, "params": copy.deepcopy(params)},
        "sampling": {"seed": seed, "pairs": 100, "horizons": [10_000], "n_samples": 100_000},
    }
    config["sampling"].update(overrides.get("sampling", {}))
    return config


def parse(raw: dict, text: str = "") -> ExperimentConfig:
    config = parse_experiment_config(
        raw, text, {k: e.defaults for k, e in EXPERIMENTS.items()}, SYSTEMS, POTENTIALS
    )
    _check_params(config, text)
    return config


def _check_params(config: ExperimentConfig, text: str) -> None:
    allowed = SYSTEM_PARAMS[config.system_kind].get(config.system, []) + SYSTEM_PARAMS[config.system_kind].get("*", [])
    for key in config.system_params:
        if key not in allowed:
            raise ConfigError(f"unknown parameter '{key}' for system '{config.system}'", line_of(text, "system.params", key))
    for key in config.potential_params:
        if key not in POTENTIAL_PARAMS[config.potential]:
            raise ConfigError(
                f"unknown parameter '{key}' for potential '{config.potential}'", line_of(text, "measure.params", key)
            )


def load_experiment(path: Path, seed: Optional[int] = None) -> ExperimentConfig:
    """Read, override and validate a config file."""
    raw = load_config(path)
    if seed is not None:
        raw.setdefault("sampling", {})["seed"] = seed
    return parse(raw, path.read_text())


def run(config: ExperimentConfig, out_dir: Path, workers: int = 1, progress: Progress = None) -> Report:
    """Run one experiment and write its artifacts (CSVs, report.txt, config.toml) into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir, config.raw or default_config(config.kind, config.seed))
    experiment = EXPERIMENTS[config.kind]
    try:
        report = experiment.runner(config, out_dir, workers, progress)
    except BudgetExceededError as e:
        report = Report(config.kind, config.seed, partial=True)
        report.note(f"budget exhausted: {e}")
    report.write(out_dir)
    return report


def list_builtins() -> dict[str, dict[str, Union[list, dict]]]:
    """Names and parameter schemas of the built-in systems, potentials and experiments."""
    return {
        "systems": {kind: {name: SYSTEM_PARAMS[kind].get(name, []) for name in names} for kind, names in SYSTEMS.items()},
        "potentials": {name: POTENTIAL_PARAMS[name] for name in POTENTIALS},
        "experiments": {name: sorted(e.defaults) for name, e in EXPERIMENTS.items()},
    }


__all__ = ["EXPERIMENTS", "default_config", "list_builtins", "load_experiment", "parse", "run"]
