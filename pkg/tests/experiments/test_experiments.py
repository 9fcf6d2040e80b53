"""Test experiment configs, the registry and end-to-end runs."""

import math

import pytest
import toml

from reditus.core import get_config_path, load_config
from reditus.errors import ConfigError
from reditus.experiments import COLUMNS, EXPERIMENTS, default_config, list_builtins, load_experiment, parse, run

GOLDEN_PRESSURE = math.log((1 + math.sqrt(5)) / 2)

BAD_PARAM = """\
[system]
kind = "shift"
name = "full"

[experiment]
kind = "pressure"

[experiment.params]
bogus = 1

[sampling]
seed = 3
"""


def small_records(seed: int = 11) -> dict:
    raw = default_config("records", seed)
    raw["sampling"].update(pairs=3, horizons=[2_000])
    raw["experiment"]["params"]["duality_checks"] = 10
    return raw


@pytest.mark.parametrize("kind", sorted(EXPERIMENTS))
def test_default_configs_parse(kind):
    config = parse(default_config(kind, seed=7))
    assert config.kind == kind
    assert config.seed == 7
    assert set(EXPERIMENTS[kind].defaults) <= set(config.params)


def test_default_pressure_config():
    config = parse(default_config("pressure"))
    assert config.system_kind == "shift"
    assert config.system == "golden-mean"
    assert config.params["expected"] == pytest.approx(GOLDEN_PRESSURE)
    assert config.params["depth"] == 12


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        default_config("teleport")


def test_unknown_parameter_reports_line():
    with pytest.raises(ConfigError) as excinfo:
        parse(toml.loads(BAD_PARAM), BAD_PARAM)
    assert excinfo.value.line == 9
    assert "bogus" in str(excinfo.value)


@pytest.mark.parametrize(
    "section, key, value",
    [
        ("system", "name", "tent"),
        ("system", "kind", "flow"),
        ("sampling", "pairs", True),
        ("sampling", "pairs", 0),
        ("sampling", "horizons", [100, 10]),
        ("measure", "potential", "coulomb"),
    ],
)
def test_invalid_values_rejected(section, key, value):
    raw = default_config("records")
    raw.setdefault(section, {})[key] = value
    with pytest.raises(ConfigError):
        parse(raw)


def test_seed_is_mandatory():
    raw = default_config("records")
    del raw["sampling"]["seed"]
    with pytest.raises(ConfigError, match="seed"):
        parse(raw)


def test_unknown_potential_parameter():
    raw = default_config("records")
    raw["measure"]["params"]["q"] = [0.5, 0.5]
    with pytest.raises(ConfigError):
        parse(raw)


def test_bad_potential_values_become_config_errors(tmp_path):
    raw = default_config("pressure")
    raw["system"]["name"] = "full"
    raw["measure"] = {"potential": "bernoulli", "params": {"p": [0.5, 0.7]}}
    del raw["experiment"]["params"]["expected"]
    with pytest.raises(ConfigError):
        run(parse(raw), tmp_path)


def test_load_experiment_with_seed_override(tmp_path):
    path = tmp_path / "pressure.toml"
    path.write_text(toml.dumps(default_config("pressure", seed=1)))
    assert load_experiment(path).seed == 1
    assert load_experiment(path, seed=42).seed == 42


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[sampling\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_experiment(path)


def test_list_builtins():
    registry = list_builtins()
    assert set(registry) == {"systems", "potentials", "experiments"}
    assert "doubling" in registry["systems"]["interval"]
    assert "cantor3" in registry["systems"]["gdms"]
    assert "gauss-cf" in registry["systems"]["gdms"]
    assert registry["potentials"]["bernoulli"] == ["p"]
    assert "k_grid" in registry["experiments"]["waiting-tail"]


def test_pressure_run(tmp_path):
    report = run(parse(default_config("pressure")), tmp_path)
    assert report.passed
    assert report.exit_code == 0
    expected = next(c for c in report.checks if c.name == "expected")
    assert expected.values["P"] == pytest.approx(0.4812118250596, abs=1e-10)
    assert (tmp_path / "pressure.csv").exists()
    assert "overall: PASS" in (tmp_path / "report.txt").read_text()
    assert load_config(get_config_path(tmp_path))["experiment"]["kind"] == "pressure"


def test_gibbs_audit_run(tmp_path):
    report = run(parse(default_config("gibbs-audit")), tmp_path)
    assert report.passed
    rows = (tmp_path / "cylinders.csv").read_text().splitlines()
    assert len(rows) == 1 + sum(2**n for n in range(1, 7))


def test_records_run(tmp_path):
    report = run(parse(small_records()), tmp_path)
    assert report.passed
    header = (tmp_path / "records.csv").read_text().splitlines()[0]
    assert header.startswith("pair_id")


def test_records_are_identical_across_worker_counts(tmp_path):
    config = parse(small_records(seed=5))
    run(config, tmp_path / "serial", workers=1)
    run(config, tmp_path / "parallel", workers=2)
    serial = (tmp_path / "serial" / "records.csv").read_bytes()
    parallel = (tmp_path / "parallel" / "records.csv").read_bytes()
    assert serial == parallel


def test_kac_run(tmp_path):
    raw = default_config("kac", seed=2)
    raw["sampling"]["n_samples"] = 20_000
    del raw["experiment"]["params"]["tolerance"]
    report = run(parse(raw), tmp_path)
    assert report.passed
    assert (tmp_path / "spectrum.csv").exists()
    assert (tmp_path / "ifs.csv").exists()


def test_markov_cover_run(tmp_path):
    raw = default_config("markov-cover", seed=3)
    raw["experiment"]["params"]["n_points"] = 10
    report = run(parse(raw), tmp_path)
    assert report.passed
    rows = (tmp_path / "cover.csv").read_text().splitlines()
    assert len(rows) == 1 + 10 * 18
    decreasing = check_named(report, "order_mass_decreasing")
    assert decreasing.passed
    assert decreasing.values["holding"] == 10


# scaled-down runs: sampling updates, param updates, params to drop, artifacts, checks that must pass
SMALL_RUNS = {
    "entry": ({"pairs": 3, "horizons": [2_000]}, {}, [], ["entry.csv"], ["running_max_nondecreasing", "monotone_coupling"]),
    "entry-cylinder": (
        {"pairs": 3, "horizons": [2_000]},
        {"mode": "cylinder", "depth": 8},
        [],
        ["entry.csv"],
        ["running_max_nondecreasing", "cylinder_exactness"],
    ),
    "waiting-tail": (
        {"n_samples": 4_000}, {"k_grid": [0, 1, 2, 4]}, [], ["waiting_tail.csv"], ["a_below_q", "monotone_in_k"]
    ),
    "induce-compare": (
        {"pairs": 3, "horizons": [20_000]},
        {"min_returns": 100, "fraction": 0.0},
        [],
        ["compare.csv"],
        ["bookkeeping_identity", "sandwich", "record_equivalence"],
    ),
    "gdms-powerlaw": ({}, {"n_radii": 8}, ["expected_alpha"], ["powerlaw.csv"], ["contraction", "alpha_floor"]),
    "divergence": (
        {"pairs": 4, "horizons": [1_000, 5_000]},
        {"small": 1e9},
        [],
        ["records.csv", "entry.csv", "divergence.csv"],
        ["running_max_nondecreasing"],
    ),
    "gdms-measure": (
        {},
        {"invariance_samples": 0, "code_samples": 100},
        [],
        ["measure.csv"],
        ["pressure", "cylinder 1", "conjugacy", "injectivity"],
    ),
}


def small_config(name: str, seed: int = 13) -> dict:
    kind = "entry" if name == "entry-cylinder" else name
    sampling, params, dropped, _, _ = SMALL_RUNS[name]
    raw = default_config(kind, seed)
    raw["sampling"].update(sampling)
    raw["experiment"]["params"].update(params)
    for key in dropped:
        raw["experiment"]["params"].pop(key, None)
    return raw


def check_named(report, name):
    return next(c for c in report.checks if c.name == name)


@pytest.mark.parametrize("name", sorted(SMALL_RUNS))
def test_small_runs(tmp_path, name):
    _, _, _, artifacts, required = SMALL_RUNS[name]
    report = run(parse(small_config(name)), tmp_path)
    assert (tmp_path / "report.txt").exists()
    for artifact in artifacts:
        header = (tmp_path / artifact).read_text().splitlines()[0]
        assert header.split(",")[0] in {"pair_id", "k", "r", "word", "horizon"}
    for check in required:
        assert check_named(report, check).passed, check


def test_rates_run(tmp_path):
    raw = default_config("rates", seed=13)
    raw["system"] = {"kind": "interval", "name": "doubling"}
    raw["measure"] = {"potential": "zero"}
    raw["sampling"]["pairs"] = 4
    del raw["experiment"]["params"]["expected_dimension"]
    report = run(parse(raw), tmp_path)
    assert check_named(report, "envelopes_ordered").passed
    assert report.passed
    assert (tmp_path / "rates.csv").read_text().startswith("pair_id,n_records")


def test_lyapunov_run(tmp_path):
    raw = default_config("lyapunov", seed=13)
    raw["experiment"]["params"]["sample_length"] = 20_000
    report = run(parse(raw), tmp_path)
    estimate = check_named(report, "lyapunov")
    assert estimate.values["chi"] == pytest.approx(math.pi**2 / (6 * math.log(2)), abs=0.1)
    assert report.passed


@pytest.mark.parametrize("name", ["divergence", "entry"])
def test_runs_are_identical_across_worker_counts(tmp_path, name):
    config = parse(small_config(name, seed=21))
    run(config, tmp_path / "serial", workers=1)
    run(config, tmp_path / "parallel", workers=2)
    for artifact in SMALL_RUNS[name][3]:
        assert (tmp_path / "serial" / artifact).read_bytes() == (tmp_path / "parallel" / artifact).read_bytes()


def test_certificate_stage_cap(tmp_path):
    raw = default_config("certificate", seed=4)
    raw["experiment"]["params"]["max_stages"] = 5
    report = run(parse(raw), tmp_path)
    assert report.exit_code == 2
    feasible = check_named(report, "ladder_feasible")
    assert feasible.passed is False
    assert feasible.values["stage"] == 0
    assert (tmp_path / "certificate.csv").read_text().splitlines() == [",".join(COLUMNS["certificate.csv"])]


def test_induce_compare_settled_ratios(tmp_path):
    raw = default_config("induce-compare", seed=0)
    raw["sampling"].update(pairs=10, horizons=[100_000])
    raw["experiment"]["params"]["fraction"] = 0.9
    report = run(parse(raw), tmp_path)
    ratio = check_named(report, "ratio_near_one")
    assert ratio.passed
    assert ratio.values["settled_pairs"] > 0
    rows = [line.split(",") for line in (tmp_path / "compare.csv").read_text().splitlines()[1:]]
    assert all((row[-1] == "True") == (int(row[3]) >= 2_000) for row in rows)
    assert report.passed
    header = (tmp_path / "compare.csv").read_text().splitlines()[0]
    assert header.endswith(",settled")


def test_orbit_of_a_rational_point(tmp_path):
    raw = default_config("orbit", seed=1)
    raw["experiment"]["params"].update(x0="1/5", length=6)
    report = run(parse(raw), tmp_path)
    assert report.passed
    rows = (tmp_path / "orbit.csv").read_text().splitlines()
    assert rows == ["n,x_n", "0,0.2", "1,0.4", "2,0.8", "3,0.6", "4,0.2", "5,0.4"]


def test_sampled_orbit(tmp_path):
    raw = default_config("orbit", seed=1)
    raw["experiment"]["params"]["length"] = 200
    report = run(parse(raw), tmp_path)
    assert report.passed
    assert check_named(report, "one_step").values["max_error"] <= 1e-9
    assert len((tmp_path / "orbit.csv").read_text().splitlines()) == 201


def test_orbit_rejects_points_outside_the_interval(tmp_path):
    raw = default_config("orbit")
    raw["experiment"]["params"]["x0"] = "3/2"
    with pytest.raises(ConfigError):
        run(parse(raw), tmp_path)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["induce-compare", "entry", "rates", "divergence", "gdms-powerlaw", "gdms-measure", "lyapunov"])
def test_default_runs_pass(tmp_path, kind):
    report = run(parse(default_config(kind)), tmp_path)
    assert report.passed, [c for c in report.checks if c.passed is False]
