"""Test records, entry statistics, waiting tails and the divergence ladder."""

import math
from fractions import Fraction

import numpy as np
import pytest

from reditus.errors import DegenerateMeasureError, LadderInfeasibleError, UnsupportedFamilyError
from reditus.expanding import make_map
from reditus.hitting import (
    HittingRecords,
    IntervalAdapter,
    ShiftAdapter,
    build_certificate,
    divergence_scan,
    entry_table,
    entry_table_cylinder,
    entry_time,
    gamma_of,
    gap_for,
    rate_estimates,
    record_sequence,
    records_from_distances,
    stage_count,
    waiting_tail,
)
from reditus.symbolic import IncidenceStructure
from reditus.thermo import gibbs_state, make_potential, seed_stream


@pytest.fixture(scope="module")
def uniform():
    return gibbs_state(make_potential("zero", {}, 2), IncidenceStructure.full(2))


@pytest.fixture(scope="module")
def doubling(uniform):
    return IntervalAdapter(make_map("doubling"), uniform)


@pytest.fixture(scope="module")
def shift(uniform):
    return ShiftAdapter(uniform, max_depth=40)


def test_records_of_periodic_orbit(doubling):
    orbit = doubling.orbit_of(Fraction(1, 5), 9)
    target = doubling.target_at(0)
    records = record_sequence(doubling, orbit, target, 8)
    assert records.times.tolist() == [1, 4]
    assert records.radii == pytest.approx([0.4, 0.2])
    assert not records.terminal
    assert records.tau(0.3) == 4
    assert records.tau(0.5) == 1
    assert records.tau(0.1) is None


def test_record_sequence_needs_long_orbit(doubling):
    orbit = doubling.orbit_of(Fraction(1, 5), 5)
    with pytest.raises(ValueError):
        record_sequence(doubling, orbit, doubling.target_at(0), 5)


def test_exact_hit_terminates_records():
    records = records_from_distances(np.array([0.0, 0.0, 0.0]))
    assert records.times.tolist() == [1]
    assert records.radii.tolist() == [0.0]
    assert records.terminal
    assert len(records.positive) == 0


def test_entry_time_direct_search():
    distances = np.array([0.2, 0.4, 0.8, 0.6, 0.2])
    assert entry_time(distances, 0.3) == 4
    assert entry_time(distances, 0.45) == 1
    assert entry_time(distances, 0.1) is None


def test_entry_table_through_records(doubling):
    orbit = doubling.orbit_of(Fraction(1, 5), 9)
    target = doubling.target_at(0)
    records = record_sequence(doubling, orbit, target, 8)
    table = entry_table(records, lambda r: doubling.ball_mass(target, r), radii=[0.3, 0.5, 0.1])
    assert table.radii.tolist() == [0.5, 0.3, 0.1]
    assert table.taus[:2].tolist() == [1, 4]
    assert table.values[:2] == pytest.approx([0.5, 1.2])
    assert table.censored.tolist() == [False, False, True]
    assert table.running_max[:2] == pytest.approx([0.5, 1.2])


def test_entry_table_at_record_radii(doubling):
    orbit = doubling.orbit_of(Fraction(1, 5), 9)
    target = doubling.target_at(0)
    table = entry_table(record_sequence(doubling, orbit, target, 8), lambda r: doubling.ball_mass(target, r))
    assert table.values == pytest.approx([0.4, 0.8])


def test_entry_table_rejects_improper_masses(doubling):
    records = HittingRecords(np.array([1, 3]), np.array([0.5, 0.1]), 10)
    with pytest.raises(ValueError):
        entry_table(records, lambda r: 2.0)


def test_cylinder_entry_table_matches_direct_search(uniform):
    rng = np.random.default_rng(7)
    codes = rng.integers(0, 2, size=600)
    target = rng.integers(0, 2, size=6)
    table = entry_table_cylinder(codes, target, uniform, 6, 500)
    for n in range(1, 7):
        direct = next((j for j in range(1, 501) if (codes[j : j + n] == target[:n]).all()), None)
        if direct is None:
            assert table.censored[n - 1]
        else:
            assert table.taus[n - 1] == direct
            assert table.values[n - 1] == pytest.approx(direct * 2.0**-n)
    assert table.masses == pytest.approx(2.0 ** -np.arange(1, 7))


def test_rate_estimates_on_power_law():
    k = np.arange(20)
    records = HittingRecords(2**k, 2.0 ** -(k + 1), 2**20)
    rates = rate_estimates(records, lambda r: 2 * r, window=5)
    assert rates.hitting == pytest.approx(1.0)
    assert rates.dimension == pytest.approx(1.0)
    assert rates.hitting_lower == pytest.approx(1.0)
    assert rates.n_records == 20


def test_rate_estimates_need_records():
    records = HittingRecords(np.array([1, 2, 5]), np.array([0.5, 0.2, 0.1]), 10)
    with pytest.raises(ValueError):
        rate_estimates(records, lambda r: r)


def test_rate_estimates_reject_empty_balls():
    k = np.arange(12)
    records = HittingRecords(2**k, 2.0**-k, 2**12)
    with pytest.raises(DegenerateMeasureError):
        rate_estimates(records, lambda r: 0.0)


def test_gauss_has_no_interval_adapter(uniform):
    with pytest.raises(UnsupportedFamilyError):
        IntervalAdapter(make_map("gauss"), uniform)


def test_waiting_tail_on_cylinder(shift):
    target = shift.sample_target(seed_stream(1, 0))
    tail = waiting_tail(shift, target, 0.1, [0, 2, 8], 20_000, seed=4)
    assert tail.ball_mass == pytest.approx(0.125)
    assert tail.a[0] == 0.0
    assert np.all(tail.q >= tail.a)
    assert tail.monotone
    assert tail.bound_holds
    assert tail.exact is not None
    assert tail.z_scores(tail.exact).max() < 5


def test_waiting_tail_grid_validation(shift):
    target = shift.sample_target(seed_stream(1, 0))
    with pytest.raises(ValueError):
        waiting_tail(shift, target, 0.1, [], 10, seed=0)
    with pytest.raises(ValueError):
        waiting_tail(shift, target, 0.1, [-1, 2], 10, seed=0)


def test_divergence_scan_running_max_is_monotone(shift):
    scan = divergence_scan(shift, 6, [100, 1_000], seed=0)
    assert len(scan.pairs) == 6
    assert all(pair.monotone for pair in scan.pairs if not pair.degenerate)
    assert len(scan.median_max) == 2


def test_divergence_scan_horizons_increase(shift):
    with pytest.raises(ValueError):
        divergence_scan(shift, 2, [1_000, 100], seed=0)


def test_ladder_constants():
    assert gamma_of(1, 1) == pytest.approx(1 - math.exp(-4))
    assert gap_for(0.5, 1.0, 0.5) == 1
    assert gap_for(0.9, 1.0, 0.5) == 4
    assert stage_count(0.99, 0.2) == 229
    assert stage_count(0.5, 1.0) == 0


def test_ladder_infeasible():
    with pytest.raises(LadderInfeasibleError):
        stage_count(1.2, 0.2)
    with pytest.raises(LadderInfeasibleError):
        gap_for(1.5, 0.0, 0.5, limit=10)


def test_certificate_for_uniform_shift(shift):
    certificate = build_certificate(shift, 0.05, 0.2, 2_000, seed=0)
    assert len(certificate.ladder) == certificate.omega + 1
    radii = [rung.r for rung in certificate.ladder]
    assert all(a > b for a, b in zip(radii, radii[1:]))
    assert certificate.verdict
    assert len(certificate.rows()) == len(certificate.ladder)
