"""Test GDMS construction, projection, separation and the projected Gibbs measure."""

import math
from fractions import Fraction

import numpy as np
import pytest

from reditus.errors import SummabilityError, UnsupportedFamilyError
from reditus.gdms import (
    CodedPoint,
    EdgePotential,
    Mobius,
    bernoulli_potential,
    ball_measure,
    check_conjugacy,
    check_contraction,
    check_injectivity,
    check_sosc,
    gdms_cover,
    gdms_from_config,
    induced_map_apply,
    limit_measure,
    lyapunov,
    make_gdms,
    power_law_fit,
    project,
    project_periodic,
)


@pytest.fixture(scope="module")
def cantor():
    return make_gdms("cantor3")


@pytest.fixture(scope="module")
def cantor_measure(cantor):
    return limit_measure(cantor, bernoulli_potential([0.5, 0.5]))


def overlapping_config():
    return {
        "name": "overlap",
        "vertices": ["X"],
        "seeds": {"X": [0, 1]},
        "edges": [
            {"i": "X", "t": "X", "coefficients": [0.6, 0]},
            {"i": "X", "t": "X", "coefficients": [0.6, 0.4]},
        ],
        "contraction": 0.6,
    }


def test_cantor_periodic_points_are_exact(cantor):
    assert project_periodic(cantor, (), (0,)) == 0
    assert project_periodic(cantor, (), (1,)) == 1
    assert project_periodic(cantor, (), (0, 1)) == Fraction(1, 4)
    assert project_periodic(cantor, (), (1, 0)) == Fraction(3, 4)
    assert project_periodic(cantor, (1,), (0,)) == Fraction(2, 3)


def test_projection_interval_shrinks(cantor):
    result = project(cantor, (0, 1, 0))
    assert result.lo == Fraction(2, 9)
    assert result.hi == Fraction(7, 27)
    assert result.radius == pytest.approx(1 / 54)
    assert result.radius <= result.bound


def test_projection_needs_a_word(cantor):
    with pytest.raises(ValueError):
        project(cantor, ())


def test_gauss_fixed_point():
    system = make_gdms("gauss-cf", {"truncation": 20})
    assert project_periodic(system, (), (1,)) == pytest.approx(math.sqrt(2) - 1, abs=1e-14)
    assert project_periodic(system, (), (0,)) == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-14)


def test_gauss_contracts_after_two_steps():
    system = make_gdms("gauss-cf", {"truncation": 40})
    assert system.level == 2
    check = check_contraction(system)
    assert check.holds
    assert check.sup_derivative == pytest.approx(0.25)


def test_sosc_cantor(cantor):
    result = check_sosc(cantor)
    assert result.osc and result.sosc
    assert result.witness_code == (0, 1)
    assert result.witness_point == Fraction(1, 4)


def test_sosc_overlap_detected():
    result = check_sosc(gdms_from_config(overlapping_config()))
    assert not result.osc
    assert not result.sosc
    assert result.overlap == (0, 1)


def test_incompatible_incidence_rejected():
    config = {
        "vertices": ["A", "B"],
        "seeds": {"A": [0, 1], "B": [0, 1]},
        "edges": [
            {"i": "A", "t": "B", "coefficients": [0.25, 0]},
            {"i": "A", "t": "A", "coefficients": [0.25, 0.5]},
        ],
        "incidence": [[1, 1], [1, 1]],
        "contraction": 0.25,
    }
    with pytest.raises(ValueError, match=r"A\[1,1\]"):
        gdms_from_config(config)


def test_unknown_map_family_rejected():
    config = overlapping_config()
    config["edges"][0]["map"] = "sine"
    with pytest.raises(UnsupportedFamilyError):
        gdms_from_config(config)


def test_unknown_system_rejected():
    with pytest.raises(ValueError):
        make_gdms("sierpinski")


def test_induced_map_shifts_code(cantor):
    z = CodedPoint((1, 0), (0, 1))
    image = induced_map_apply(cantor, z)
    assert image == CodedPoint((0,), (0, 1))
    assert image.point(cantor) == Fraction(1, 12)
    assert induced_map_apply(cantor, CodedPoint((), (0, 1))) == CodedPoint((), (1, 0))


def test_bernoulli_measure_on_cantor(cantor_measure):
    assert cantor_measure.pressure == pytest.approx(0.0, abs=1e-10)
    assert cantor_measure.cylinder(()) == 1.0
    assert cantor_measure.cylinder((0,)) == pytest.approx(0.5, abs=1e-10)
    assert cantor_measure.cylinder((1, 0, 1)) == pytest.approx(0.125, abs=1e-10)
    assert cantor_measure.entropy == pytest.approx(math.log(2), abs=1e-9)
    assert cantor_measure.lyapunov == pytest.approx(math.log(3), abs=1e-9)
    assert cantor_measure.alpha_theory == pytest.approx(0.5 * math.log(2) / math.log(3), abs=1e-9)


@pytest.mark.parametrize("k", [2, 4, 7])
def test_ball_measure_at_left_endpoint(cantor_measure, k):
    estimate = ball_measure(cantor_measure, 0.0, 3.0**-k)
    assert estimate.exact
    assert estimate.value == pytest.approx(2.0**-k, rel=1e-8)


def test_ball_covering_everything(cantor_measure):
    estimate = ball_measure(cantor_measure, 0.5, 0.6)
    assert estimate.exact
    assert estimate.value == 1.0


def test_ball_unknown_method(cantor_measure):
    with pytest.raises(ValueError):
        ball_measure(cantor_measure, 0.2, 0.01, method="quadrature")


def test_power_law_on_cantor(cantor_measure):
    fit = power_law_fit(cantor_measure, 0.0, np.geomspace(1e-8, 1e-1, 30))
    assert fit.alpha == pytest.approx(math.log(2) / math.log(3), abs=0.05)
    assert fit.exceeds_floor
    assert fit.C >= 1.0
    assert (fit.residuals <= 1e-12).all()


def test_power_law_needs_range(cantor_measure):
    with pytest.raises(ValueError):
        power_law_fit(cantor_measure, 0.0, np.geomspace(1e-2, 1e-1, 12))


def test_lyapunov_of_cantor(cantor_measure):
    estimate = lyapunov(cantor_measure, 5000, seed=3)
    assert estimate.value == pytest.approx(math.log(3), abs=1e-9)


def test_cover_stays_in_enlarged_ball(cantor):
    cover = gdms_cover(cantor, 0.0, 0.1)
    assert cover.depth == 6
    assert cover.inside_enlarged_ball
    assert all(len(word) == 6 and word[0] == 0 for word in cover.words)


def test_gauss_measure_of_first_cylinder():
    system = make_gdms("gauss-cf", {"truncation": 1000})
    measure = limit_measure(system, EdgePotential(t=1.0))
    assert measure.pressure == pytest.approx(0.0, abs=5e-3)
    assert measure.cylinder((0,)) == pytest.approx(math.log2(4 / 3), abs=3e-3)


def test_gauss_summability_threshold():
    system = make_gdms("gauss-cf", {"truncation": 50})
    with pytest.raises(SummabilityError):
        limit_measure(system, EdgePotential(t=0.5))


def test_negative_exponent_rejected():
    with pytest.raises(ValueError):
        EdgePotential(t=-1.0)


def test_mobius_inverse():
    m = Mobius(Fraction(2), Fraction(1), Fraction(1), Fraction(3))
    assert m.inverse()(m(Fraction(2, 7))) == Fraction(2, 7)
    assert Mobius.affine(Fraction(1, 3), Fraction(2, 3)).inverse()(Fraction(7, 9)) == Fraction(1, 3)


def test_conjugacy_on_cantor(cantor_measure):
    check = check_conjugacy(cantor_measure, 200, seed=4)
    assert check.samples == 200
    assert check.outside == 0
    assert check.max_excess <= 1e-9
    assert check.holds


def test_injectivity_on_cantor(cantor_measure):
    check = check_injectivity(cantor_measure, 300, seed=4)
    assert check.holds
    assert check.overlaps == 0
    assert check.collisions == 0
    assert 1 < check.distinct_codes <= 2**check.depth
