"""Test pressure, Gibbs states, mixing probes and samplers."""

import math

import numpy as np
import pytest

from reditus.errors import DegenerateMeasureError, IrreducibilityError, SummabilityError
from reditus.symbolic import IncidenceStructure, admissible_array
from reditus.thermo import (
    GOLDEN,
    LocallyConstantPotential,
    birkhoff_sum_bounds,
    fit_mixing_constants,
    free_energy,
    gibbs_state,
    make_potential,
    mixing_probe,
    pressure,
    sample_typical,
    seed_stream,
    taboo_hitting,
    verify_gibbs_property,
)


@pytest.fixture
def full2():
    return IncidenceStructure.full(2)


@pytest.fixture
def golden_mean():
    return IncidenceStructure.golden_mean()


@pytest.fixture
def bernoulli_37(full2):
    return gibbs_state(make_potential("bernoulli", {"p": [0.3, 0.7]}, 2), full2)


def test_birkhoff_sum_bounds(full2):
    zero = make_potential("zero", {}, 2)
    assert birkhoff_sum_bounds(zero, (0, 1, 1), full2) == (0.0, 0.0)
    bernoulli = make_potential("bernoulli", {"p": [0.3, 0.7]}, 2)
    low, high = birkhoff_sum_bounds(bernoulli, (0, 1), full2)
    assert low == pytest.approx(math.log(0.21))
    assert high == pytest.approx(math.log(0.21))
    indicator = LocallyConstantPotential(np.array([1.0, 0.0]))
    assert birkhoff_sum_bounds(indicator, (0, 0, 1), full2) == (2.0, 2.0)


def test_pressure_full_shift(full2):
    zero = make_potential("zero", {}, 2)
    assert pressure(zero, full2).value == pytest.approx(math.log(2), abs=1e-12)
    truncated = pressure(zero, full2, depth=12, method="truncated-limit")
    assert truncated.value == pytest.approx(math.log(2), abs=1e-9)
    assert len(truncated.partial) == 12


def test_pressure_golden_mean(golden_mean):
    zero = make_potential("zero", {}, 2)
    assert pressure(zero, golden_mean).value == pytest.approx(0.4812118250596034, abs=1e-10)


def test_pressure_methods_agree(golden_mean):
    f = make_potential("markov_depth1", {"table": [[0.2, -0.4], [0.1, 0.0]]}, 2)
    spectral = pressure(f, golden_mean).value
    errors = [abs(pressure(f, golden_mean, depth=n, method="truncated-limit").value - spectral) for n in (4, 8, 12)]
    assert errors[2] <= errors[0] / 2


def test_pressure_of_normalized_bernoulli(full2):
    f = make_potential("bernoulli", {"p": [0.3, 0.7]}, 2)
    assert pressure(f, full2).value == pytest.approx(0.0, abs=1e-12)
    words = admissible_array(full2, 10)
    assert np.prod(np.array([0.3, 0.7])[words], axis=1).sum() == pytest.approx(1.0)


def test_pressure_rejects_unknown_method(full2):
    with pytest.raises(ValueError):
        pressure(make_potential("zero", {}, 2), full2, method="magic")


def test_maximal_entropy_state(full2):
    state = gibbs_state(make_potential("zero", {}, 2), full2)
    assert state.cylinder((0, 1, 1)) == pytest.approx(0.125)
    assert state.gibbs_constant == pytest.approx(1.0)
    assert state.entropy == pytest.approx(math.log(2))
    assert state.decay == pytest.approx(math.log(2))


def test_bernoulli_state(bernoulli_37):
    assert bernoulli_37.cylinder((0, 1)) == pytest.approx(0.21, abs=1e-12)
    assert bernoulli_37.pressure == pytest.approx(0.0, abs=1e-12)
    assert bernoulli_37.entropy == pytest.approx(-(0.3 * math.log(0.3) + 0.7 * math.log(0.7)), abs=1e-12)
    np.testing.assert_allclose(bernoulli_37.kernel, [[0.3, 0.7], [0.3, 0.7]], atol=1e-12)


def test_golden_mean_state_matches_eigen_data(golden_mean):
    state = gibbs_state(make_potential("zero", {}, 2), golden_mean)
    # Parry measure: mu([1]) = GOLDEN^2 / (1 + GOLDEN^2), mu([1,1]) = mu([1]) / GOLDEN
    first = GOLDEN**2 / (1 + GOLDEN**2)
    assert state.cylinder((0,)) == pytest.approx(first, abs=1e-12)
    assert state.cylinder((0, 0)) == pytest.approx(first / GOLDEN, abs=1e-12)
    assert state.cylinder((1, 1)) == 0.0


def test_gibbs_needs_irreducibility():
    with pytest.raises(IrreducibilityError):
        gibbs_state(make_potential("zero", {}, 2), IncidenceStructure(np.eye(2, dtype=int)))


def test_gauss_potential_summability():
    with pytest.raises(SummabilityError):
        make_potential("gauss_t", {"t": 0.5}, 10)


def test_bernoulli_weights_are_checked():
    with pytest.raises(ValueError):
        make_potential("bernoulli", {"p": [0.3, 0.6]}, 2)


def test_audit_bernoulli_is_exact(bernoulli_37):
    audit = verify_gibbs_property(bernoulli_37, 10)
    assert audit.passed
    assert audit.worst_ratio == pytest.approx(1.0, abs=1e-9)
    assert audit.additivity_error <= 1e-12
    assert audit.normalization_error <= 1e-12
    assert audit.decay_ok


def test_audit_golden_mean(golden_mean):
    state = gibbs_state(make_potential("zero", {}, 2), golden_mean)
    audit = verify_gibbs_property(state, 12)
    assert audit.passed
    assert 1 / state.gibbs_constant <= audit.min_ratio <= audit.max_ratio <= state.gibbs_constant * (1 + 1e-9)


def test_variational_principle(golden_mean):
    f = make_potential("zero", {}, 2)
    state = gibbs_state(f, golden_mean)
    assert free_energy(f, golden_mean, state.kernel) == pytest.approx(state.pressure, abs=1e-12)
    uniform = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert free_energy(f, golden_mean, uniform) < state.pressure
    with pytest.raises(ValueError):
        free_energy(f, golden_mean, np.full((2, 2), 0.5))


def test_mixing_probe_independent(full2):
    state = gibbs_state(make_potential("bernoulli", {"p": [0.5, 0.5]}, 2), full2)
    assert mixing_probe(state, (0, 1), (1, 1, 0), 3).ratio == pytest.approx(1.0, abs=1e-12)


def test_mixing_probe_sampled_agrees(golden_mean):
    state = gibbs_state(make_potential("zero", {}, 2), golden_mean)
    exact = mixing_probe(state, (0,), (0,), 3)
    sampled = mixing_probe(state, (0,), (0,), 3, method="monte-carlo", n_samples=200_000, seed=3)
    assert abs(sampled.ratio - exact.ratio) <= 5 * sampled.stderr


def test_mixing_probe_rejects_short_gap(full2):
    state = gibbs_state(make_potential("zero", {}, 2), full2)
    with pytest.raises(ValueError):
        mixing_probe(state, (0,), (0, 1), 1)


def test_fit_mixing_constants(full2, golden_mean):
    independent = fit_mixing_constants(gibbs_state(make_potential("zero", {}, 2), full2))
    assert independent.C == 1.0
    assert independent.D == 0.0
    golden = fit_mixing_constants(gibbs_state(make_potential("zero", {}, 2), golden_mean))
    assert golden.C > 1.0
    assert 0 < golden.gamma < 1
    assert all(d <= golden.D * golden.gamma**j * (1 + 1e-9) for j, d in enumerate(golden.deviations) if d > 1e-14)


def test_sample_typical_frequencies(full2, golden_mean):
    half = gibbs_state(make_potential("bernoulli", {"p": [0.5, 0.5]}, 2), full2)
    codes = sample_typical(half, 1_000_000, seed=11).array(1_000_000)
    assert abs(codes.mean() - 0.5) <= 0.002
    golden = gibbs_state(make_potential("zero", {}, 2), golden_mean)
    path = sample_typical(golden, 100_000, seed=11).array(100_000)
    assert not np.any((path[:-1] == 1) & (path[1:] == 1))


def test_seed_stream_is_counter_based():
    a = seed_stream(42, 3).integers(0, 2**32, size=4)
    b = seed_stream(42, 3).integers(0, 2**32, size=4)
    c = seed_stream(42, 4).integers(0, 2**32, size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_taboo_hitting_geometric(full2):
    state = gibbs_state(make_potential("bernoulli", {"p": [0.5, 0.5]}, 2), full2)
    probabilities = taboo_hitting(state, [(0,)], 10)
    np.testing.assert_allclose(probabilities, 0.5 ** np.arange(1, 11), atol=1e-15)
    with pytest.raises(DegenerateMeasureError):
        taboo_hitting(state, [], 10)
