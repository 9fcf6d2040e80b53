"""Test first-return systems over the doubling map."""

from fractions import Fraction

import numpy as np
import pytest

from reditus.errors import CensoredError, DegenerateMeasureError, NonMarkovRegionError
from reditus.expanding import make_map
from reditus.induction import (
    MarkovBase,
    build_local_ifs,
    check_return_sums,
    compare_hitting_statistics,
    first_return_time,
    induce,
    induced_map,
    induced_potential,
    kac_check,
    make_region,
    record_equivalence,
    region_from_intervals,
    return_sums,
    return_time_spectrum,
    sample_base_codes,
    sandwich_check,
)
from reditus.symbolic import IncidenceStructure
from reditus.thermo import gibbs_state, make_potential, seed_stream


@pytest.fixture(scope="module")
def base():
    state = gibbs_state(make_potential("zero", {}, 2), IncidenceStructure.full(2))
    return MarkovBase(state, make_map("doubling"))


@pytest.fixture(scope="module")
def left_half(base):
    return induce(base, region_from_intervals(base, [(0, Fraction(1, 2))]))


def test_region_from_intervals(base):
    assert region_from_intervals(base, [(0, 0.5)]).words == ((0,),)
    region = region_from_intervals(base, [(0.25, 0.75)])
    assert region.words == ((0, 1), (1, 0))
    assert region.intervals(base.tmap) == [(Fraction(1, 4), Fraction(3, 4))]


def test_region_must_be_union_of_cells(base):
    with pytest.raises(NonMarkovRegionError):
        region_from_intervals(base, [(0, 0.3)], max_depth=10)
    with pytest.raises(NonMarkovRegionError):
        region_from_intervals(base, [(0.5, 1.5)])


def test_empty_region_rejected(base):
    with pytest.raises(DegenerateMeasureError):
        make_region([], base)


def test_map_and_state_must_share_coding(base):
    with pytest.raises(ValueError):
        MarkovBase(base.state, make_map("markov2"))


def test_induced_mass(left_half):
    assert left_half.mass == pytest.approx(0.5)
    assert left_half.conditional(0.125) == pytest.approx(0.25)
    assert left_half.margin(Fraction(1, 8)) == pytest.approx(0.125)
    assert left_half.margin(Fraction(3, 4)) == 0.0


@pytest.mark.parametrize(
    "x, expected",
    [(Fraction(1, 10), 1), (Fraction(3, 10), 2), (Fraction(0), 1), (Fraction(7, 16), 4)],
)
def test_first_return_time_of_points(left_half, x, expected):
    assert first_return_time(left_half, x, 50).value == expected


def test_first_return_time_of_codes(left_half):
    codes = np.array([0, 1, 1, 0, 1, 0])
    assert first_return_time(left_half, codes, 10).value == 3
    with pytest.raises(CensoredError):
        first_return_time(left_half, np.array([0, 1, 1]), 10)


def test_first_return_time_rejects_outside_points(left_half):
    with pytest.raises(ValueError):
        first_return_time(left_half, Fraction(3, 4), 10)
    with pytest.raises(ValueError):
        first_return_time(left_half, Fraction(1, 4), 0)


def test_induced_map_is_exact(left_half):
    assert induced_map(left_half, Fraction(3, 10), 10) == Fraction(1, 5)


def test_return_sums_are_visit_times(left_half):
    codes = np.array([0, 1, 0, 0, 1, 1, 0, 1])
    assert return_sums(left_half, codes, 3, 7).tolist() == [2, 3, 6]


def test_return_sums_match_base_iterates(left_half):
    points = [Fraction(3, 10), Fraction(1, 7), Fraction(1, 3), Fraction(5, 16)]
    check = check_return_sums(left_half, points, 10, 1_000)
    assert check.holds
    assert check.points == 4
    assert check.censored == 0


def test_return_sums_past_the_horizon_are_censored(left_half):
    # the orbit of 1/2 - 2^-30 stays in [1/2, 1) for 29 steps
    check = check_return_sums(left_half, [Fraction(1, 2) - Fraction(1, 2**30)], 3, 20)
    assert check.censored == 1
    assert check.holds


def test_return_spectrum_is_geometric(left_half):
    spectrum = return_time_spectrum(left_half, 40)
    assert np.allclose(spectrum.masses[:10], 0.5 ** np.arange(1, 11))
    assert spectrum.total == pytest.approx(1.0, abs=1e-9)
    assert spectrum.mean == pytest.approx(2.0, abs=1e-9)


def test_kac_mean_return_time(left_half):
    result = kac_check(left_half, 20_000, seed=5, horizon=1_000)
    assert result.target == pytest.approx(2.0)
    assert result.censored_fraction == 0.0
    assert result.z < 5


def test_local_ifs_branches(left_half):
    ifs = build_local_ifs(left_half, max_return=10)
    assert len(ifs.branches) == 10
    assert [b.return_time for b in ifs.branches] == list(range(1, 11))
    assert ifs.branches[2].word == (0, 1, 1, 0)
    assert all(b.onto for b in ifs.branches)
    assert ifs.contraction == pytest.approx(0.5)
    assert ifs.branches[3].conditional_mass == pytest.approx(2.0**-4)
    assert ifs.uncovered == pytest.approx(2.0**-10)


def test_local_ifs_as_gdms(left_half):
    system = build_local_ifs(left_half, max_return=5).to_gdms()
    assert system.n_edges == 5
    assert system.seeds == ((Fraction(0), Fraction(1, 2)),)
    assert system.maps[0](Fraction(1, 2)) == Fraction(1, 4)


def test_induced_potential_sums_along_excursion(left_half):
    assert induced_potential(left_half, lambda x: x, Fraction(3, 10), 10) == pytest.approx(0.9)
    assert induced_potential(left_half, lambda x: 1.0, Fraction(7, 16), 10) == 4.0


def test_hitting_comparison_bookkeeping(left_half):
    codes = sample_base_codes(left_half, seed_stream(0, 0), 2_000)
    comparison = compare_hitting_statistics(left_half, Fraction(1, 4), codes, 2_000)
    assert comparison.radii.size > 0
    assert (comparison.radii <= 0.25).all()
    assert comparison.identity.all()
    assert sandwich_check(comparison)
    assert record_equivalence(left_half, Fraction(1, 4), codes, 2_000)
    settled = comparison.settled(50)
    assert np.array_equal(settled, comparison.induced_taus >= 50)
    assert [row[-1] for row in comparison.rows(0, 50)] == settled.tolist()


def test_hitting_comparison_needs_interior_point(left_half):
    codes = sample_base_codes(left_half, seed_stream(0, 1), 100)
    with pytest.raises(ValueError):
        compare_hitting_statistics(left_half, Fraction(3, 4), codes, 100)
