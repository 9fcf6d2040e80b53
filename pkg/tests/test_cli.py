"""Test reditus CLI functionality."""

import toml
from typer.testing import CliRunner

from reditus.cli import app
from reditus.experiments import default_config

runner = CliRunner()


def write_config(path, raw):
    path.write_text(toml.dumps(raw))
    return path


def test_list_flag():
    result = runner.invoke(app, ["--list"])
    assert result.exit_code == 0
    assert "cantor3" in result.stdout
    assert "doubling" in result.stdout
    assert "pressure" in result.stdout


def test_list_builtins_command():
    result = runner.invoke(app, ["list-builtins"])
    assert result.exit_code == 0
    assert "Systems" in result.stdout
    assert "Experiments" in result.stdout


def test_pressure_command(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["pressure", "--out", str(out)])
    assert result.exit_code == 0
    assert "Configuration saved" in result.stdout
    assert (out / "pressure.csv").exists()
    assert (out / "report.txt").exists()
    assert toml.load(out / "config.toml")["experiment"]["kind"] == "pressure"


def test_seed_override(tmp_path):
    config = write_config(tmp_path / "pressure.toml", default_config("pressure", seed=1))
    out = tmp_path / "out"
    result = runner.invoke(app, ["pressure", "-c", str(config), "-o", str(out), "--seed", "9"])
    assert result.exit_code == 0
    assert toml.load(out / "config.toml")["sampling"]["seed"] == 9


def test_missing_config(tmp_path):
    result = runner.invoke(app, ["pressure", "--config", str(tmp_path / "absent.toml")])
    assert result.exit_code == 3
    assert "Error" in result.stdout


def test_invalid_config(tmp_path):
    raw = default_config("pressure")
    raw["sampling"]["pairs"] = 0
    config = write_config(tmp_path / "bad.toml", raw)
    result = runner.invoke(app, ["pressure", "--config", str(config), "--out", str(tmp_path / "out")])
    assert result.exit_code == 3
    assert "Error" in result.stdout
    assert not (tmp_path / "out").exists()


def test_config_for_another_experiment(tmp_path):
    config = write_config(tmp_path / "records.toml", default_config("records"))
    result = runner.invoke(app, ["pressure", "--config", str(config)])
    assert result.exit_code == 3
    assert "records" in result.stdout


def test_failed_check_exits_with_two(tmp_path):
    raw = default_config("pressure")
    raw["experiment"]["params"]["expected"] = 1.0
    config = write_config(tmp_path / "wrong.toml", raw)
    out = tmp_path / "out"
    result = runner.invoke(app, ["pressure", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 2
    assert "overall: FAIL" in (out / "report.txt").read_text()


def test_orbit_command(tmp_path):
    raw = default_config("orbit")
    raw["experiment"]["params"].update(x0="1/3", length=4)
    config = write_config(tmp_path / "orbit.toml", raw)
    out = tmp_path / "out"
    result = runner.invoke(app, ["orbit", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0
    rows = (out / "orbit.csv").read_text().splitlines()
    assert rows[0] == "n,x_n"
    assert len(rows) == 5
