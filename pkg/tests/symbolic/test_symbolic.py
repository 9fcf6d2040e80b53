"""Test words, incidence structures, paths and the metrics d_alpha."""

import itertools
import math
import pickle
import tempfile
from pathlib import Path

import numpy as np
import pytest

from reditus.errors import BudgetExceededError, CensoredError, InadmissibleWordError
from reditus.symbolic import (
    IncidenceStructure,
    SymbolPath,
    UltrametricSpec,
    admissible_array,
    ball_to_cylinder,
    check_admissible,
    count_admissible,
    cylinder_hits,
    cylinder_depth,
    d_alpha,
    dump_incidence,
    enumerate_admissible,
    format_word,
    is_finitely_irreducible,
    load_incidence,
    match_lengths,
    parse_incidence,
    parse_word,
    wedge_length,
)


@pytest.fixture
def golden_mean():
    return IncidenceStructure.golden_mean()


def test_wedge_first_disagreement():
    """Paths 1,2,1,2,... and 1,2,2,... share two symbols."""
    omega = SymbolPath.periodic((), (0, 1))
    tau = SymbolPath.periodic((0,), (1,))
    wedge = wedge_length(omega, tau, 10)
    assert wedge.length == 2
    assert not wedge.exceeds


def test_wedge_identical_paths_exceed_horizon():
    omega = SymbolPath.periodic((), (0, 1))
    wedge = wedge_length(omega, omega, 10)
    assert wedge.exceeds
    assert wedge.length == 10


def test_wedge_disagree_at_first_symbol():
    assert wedge_length(SymbolPath.periodic((), (0,)), SymbolPath.periodic((), (1,)), 10).length == 0


def test_d_alpha_examples():
    omega = SymbolPath.periodic((), (0, 1))
    tau = SymbolPath.periodic((0,), (1,))
    assert d_alpha(omega, tau, UltrametricSpec(1.0), 10) == pytest.approx(math.exp(-2), abs=1e-12)
    ones, twos = SymbolPath.periodic((), (0,)), SymbolPath.periodic((), (1,))
    assert d_alpha(ones, twos, UltrametricSpec(2.0), 10) == 1.0
    again = SymbolPath.periodic((), (0, 1))
    assert d_alpha(omega, again, UltrametricSpec(1.0), 10, floor_zero=True) == 0.0


def test_d_alpha_rejects_bad_horizon():
    omega = SymbolPath.periodic((), (0,))
    with pytest.raises(ValueError):
        d_alpha(omega, omega, UltrametricSpec(), 0)


def test_ultrametric_inequality():
    rng = np.random.default_rng(7)
    spec = UltrametricSpec(0.7)
    paths = [SymbolPath.from_array(rng.integers(0, 2, size=40), ("sample", i)) for i in range(12)]
    for a, b, c in itertools.combinations(paths, 3):
        assert d_alpha(a, c, spec, 30) <= max(d_alpha(a, b, spec, 30), d_alpha(b, c, spec, 30)) + 1e-15


def test_path_shift_shares_memo():
    path = SymbolPath.periodic((2,), (0, 1))
    assert path.prefix(4) == (2, 0, 1, 0)
    shifted = path.shift(1)
    assert shifted.prefix(3) == (0, 1, 0)
    assert shifted.symbol(1) == 1


def test_finite_path_is_censored():
    path = SymbolPath.from_array(np.array([0, 1]), "short")
    with pytest.raises(CensoredError):
        path.prefix(3)


def test_path_checks_admissibility(golden_mean):
    path = SymbolPath.periodic((), (1,), incidence=golden_mean)
    with pytest.raises(InadmissibleWordError):
        path.prefix(2)


@pytest.mark.parametrize(
    "alpha, r, depth",
    [(1.0, 0.1, 3), (1.0, 1.0, 1), (0.5, 0.2, 4)],
)
def test_cylinder_depth(alpha, r, depth):
    assert cylinder_depth(r, UltrametricSpec(alpha)) == depth


def test_ball_is_cylinder_by_membership():
    """B(rho, 0.2) under alpha = 0.5 is the depth-4 cylinder, checked over all words of depth 6."""
    spec = UltrametricSpec(0.5)
    rho = SymbolPath.periodic((), (0, 1, 1))
    cylinder = ball_to_cylinder(rho, 0.2, spec)
    assert cylinder.depth == 4
    full = IncidenceStructure.full(2)
    for word in enumerate_admissible(full, 6):
        tau = SymbolPath.from_array(np.array(word), ("word", word))
        inside = d_alpha(rho, tau, spec, 6) < 0.2
        assert inside == cylinder.contains_word(word)


def test_cylinder_depth_rejects_radius():
    with pytest.raises(ValueError):
        cylinder_depth(0.0, UltrametricSpec())
    with pytest.raises(ValueError):
        cylinder_depth(1.5, UltrametricSpec())


def test_finite_irreducibility_witnesses(golden_mean):
    assert is_finitely_irreducible(IncidenceStructure.full(2), 2) == ((),)
    assert is_finitely_irreducible(golden_mean, 2) == ((), (0,))
    assert is_finitely_irreducible(IncidenceStructure(np.eye(2, dtype=int)), 5) is None


def test_enumerate_admissible_counts(golden_mean):
    assert len(enumerate_admissible(IncidenceStructure.full(2), 3)) == 8
    assert len(enumerate_admissible(golden_mean, 3)) == 5
    assert enumerate_admissible(golden_mean, 0) == [()]
    assert all(check_admissible(golden_mean, w) for w in enumerate_admissible(golden_mean, 6))
    assert count_admissible(golden_mean, 10) == 144


def test_enumeration_budget():
    with pytest.raises(BudgetExceededError) as e:
        admissible_array(IncidenceStructure.full(3), 10, budget=1000)
    assert e.value.needed == 3**10


def test_inadmissible_word_position(golden_mean):
    with pytest.raises(InadmissibleWordError) as e:
        check_admissible(golden_mean, (0, 1, 1, 0))
    assert e.value.position == 1


def test_word_format_is_one_based():
    assert format_word((0, 1, 1)) == "1,2,2"
    assert parse_word("1,2,2") == (0, 1, 1)
    assert parse_word("") == ()


def test_incidence_text_format(golden_mean):
    with tempfile.TemporaryDirectory() as temp_dir:
        path = Path(temp_dir) / "golden.txt"
        dump_incidence(golden_mean, path)
        assert path.read_text() == "2\n1 1\n1 0\n"
        assert load_incidence(path) == golden_mean


def test_incidence_text_rejects_bad_shape():
    with pytest.raises(ValueError):
        parse_incidence("2\n1 1\n")
    with pytest.raises(ValueError):
        IncidenceStructure(np.array([[2]]))


def test_prune_drops_dead_symbols():
    pruned, kept = IncidenceStructure(np.array([[1, 1, 0], [0, 0, 1], [0, 0, 0]])).prune()
    assert kept == (0,)
    assert pruned.alphabet_size == 1


def test_primitivity(golden_mean):
    assert golden_mean.is_primitive()
    assert not IncidenceStructure(np.array([[0, 1], [1, 0]])).is_primitive()


def test_full_shift_pickles_as_view():
    full = IncidenceStructure.full(1000, truncated=True)
    restored = pickle.loads(pickle.dumps(full))
    assert restored == full
    assert restored.complete
    assert len(pickle.dumps(full)) < 1000


def test_match_lengths():
    codes = np.array([0, 1, 0, 1, 1])
    target = np.array([0, 1, 1])
    assert match_lengths(codes, target, 0, 3, 3).tolist() == [2, 0, 3]
    # fewer symbols than max_depth near the end lower the cap
    assert match_lengths(codes, target, 3, 5, 3).tolist() == [0, 0]


def test_cylinder_hits_agree_with_match_lengths():
    codes = np.array([[0, 1, 0, 1, 1, 0], [1, 1, 0, 1, 1, 0]])
    hits = cylinder_hits(codes, (0, 1), 4)
    assert hits.tolist() == [[True, False, True, False], [False, False, True, False]]
    target = np.array([0, 1])
    assert (match_lengths(codes[0], target, 0, 4, 2) >= 2).tolist() == hits[0].tolist()
