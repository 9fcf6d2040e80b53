"""Reditus core functionality - configuration, task pool and experiment artifacts."""

import csv
import logging
import re
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import toml

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.toml"
REPORT_NAME = "report.txt"

# allowed keys per table, with the python types each may take
SCHEMA: dict[str, dict[str, tuple[type, ...]]] = {
    "system": {"kind": (str,), "name": (str,), "params": (dict,)},
    "measure": {"potential": (str,), "params": (dict,), "nodes": (int,)},
    "experiment": {"kind": (str,), "params": (dict,)},
    "sampling": {
        "seed": (int,),
        "pairs": (int,),
        "horizons": (list,),
        "n_samples": (int,),
        "workers": (int,),
    },
}
TOP_LEVEL = {"output": (str,)}
SYSTEM_KINDS = ("shift", "interval", "gdms")


def get_config_path(out_dir: Path) -> Path:
    """Get the path of the resolved config kept next to the artifacts."""
    return out_dir / CONFIG_NAME


def load_config(path: Path) -> dict:
    """Load an experiment config file."""
    text = path.read_text()
    try:
        return toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"invalid TOML: {e.msg}", e.lineno) from e


def save_config(out_dir: Path, config: dict) -> None:
    """Save the resolved config into the artifact directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(get_config_path(out_dir), "w") as f:
        toml.dump(config, f)


def line_of(text: str, table: Optional[str], key: Optional[str] = None) -> Optional[int]:
    """1-based line of ``key`` inside ``[table]`` (or of the table header itself)."""
    current: Optional[str] = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[\s*([^\]]+?)\s*\]$", stripped)
        if header:
            current = header.group(1)
            if key is None and current == table:
                return number
            continue
        assignment = re.match(r"^\"?([A-Za-z0-9_\-]+)\"?\s*=", stripped)
        if assignment and key is not None and assignment.group(1) == key and current == table:
            return number
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment configuration."""

    kind: str
    system_kind: str
    system: str
    system_params: dict
    potential: str
    potential_params: dict
    params: dict
    seed: int
    pairs: int = 100
    horizons: tuple[int, ...] = (10_000,)
    n_samples: int = 100_000
    workers: Optional[int] = None
    nodes: int = 48
    output: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False)


def _check_type(value: Any, types: tuple[type, ...], where: str, line: Optional[int]) -> None:
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where} must be {types[0].__name__}, got bool", line)
    if not isinstance(value, types):
        raise ConfigError(f"{where} must be {types[0].__name__}, got {type(value).__name__}", line)


def parse_experiment_config(
    raw: dict,
    text: str = "",
    experiments: Optional[dict[str, dict]] = None,
    names: Optional[dict[str, Sequence[str]]] = None,
    potentials: Sequence[str] = (),
) -> ExperimentConfig:
    """Validate a raw config dict; ``text`` is the TOML source used for line numbers.

    ``experiments`` maps each experiment kind to its default parameters (unknown
    parameters are rejected), ``names`` maps each system kind to its built-in names.
    """
    for key in raw:
        if key not in SCHEMA and key not in TOP_LEVEL:
            raise ConfigError(f"unknown key '{key}'", line_of(text, key) or line_of(text, None, key))
    for table, allowed in SCHEMA.items():
        section = raw.get(table, {})
        _check_type(section, (dict,), f"[{table}]", line_of(text, table))
        for key, value in section.items():
            line = line_of(text, table, key) or line_of(text, f"{table}.{key}")
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' in [{table}]", line)
            _check_type(value, allowed[key], f"{table}.{key}", line)
    if "output" in raw:
        _check_type(raw["output"], TOP_LEVEL["output"], "output", line_of(text, None, "output"))

    sampling = raw.get("sampling", {})
    if "seed" not in sampling:
        raise ConfigError("sampling.seed is mandatory", line_of(text, "sampling"))
    if not 0 <= sampling["seed"] < 2**64:
        raise ConfigError("sampling.seed must be an unsigned 64-bit integer", line_of(text, "sampling", "seed"))

    experiment = raw.get("experiment", {})
    kind = experiment.get("kind")
    if kind is None:
        raise ConfigError("experiment.kind is mandatory", line_of(text, "experiment"))
    params = dict(experiment.get("params", {}))
    if experiments is not None:
        if kind not in experiments:
            raise ConfigError(f"unknown experiment '{kind}'", line_of(text, "experiment", "kind"))
        for key in params:
            if key not in experiments[kind]:
                raise ConfigError(
                    f"unknown parameter '{key}' for experiment '{kind}'",
                    line_of(text, "experiment.params", key),
                )
        params = {**experiments[kind], **params}

    system = raw.get("system", {})
    system_kind = system.get("kind", "shift")
    if system_kind not in SYSTEM_KINDS:
        raise ConfigError(f"unknown system kind '{system_kind}'", line_of(text, "system", "kind"))
    name = system.get("name")
    if name is None:
        raise ConfigError("system.name is mandatory", line_of(text, "system"))
    if names is not None and name not in names.get(system_kind, ()):
        raise ConfigError(f"unknown {system_kind} system '{name}'", line_of(text, "system", "name"))

    measure = raw.get("measure", {})
    potential = measure.get("potential", "zero")
    if potentials and potential not in potentials:
        raise ConfigError(f"unknown potential '{potential}'", line_of(text, "measure", "potential"))

    horizons = tuple(sampling.get("horizons", (10_000,)))
    if not horizons or not all(isinstance(h, int) and h >= 1 for h in horizons):
        raise ConfigError("sampling.horizons must be positive integers", line_of(text, "sampling", "horizons"))
    if any(a >= b for a, b in zip(horizons, horizons[1:])):
        raise ConfigError("sampling.horizons must be strictly increasing", line_of(text, "sampling", "horizons"))
    for key in ("pairs", "n_samples", "workers"):
        if key in sampling and sampling[key] < 1:
            raise ConfigError(f"sampling.{key} must be positive", line_of(text, "sampling", key))

    return ExperimentConfig(
        kind=kind,
        system_kind=system_kind,
        system=name,
        system_params=dict(system.get("params", {})),
        potential=potential,
        potential_params=dict(measure.get("params", {})),
        params=params,
        seed=int(sampling["seed"]),
        pairs=int(sampling.get("pairs", 100)),
        horizons=horizons,
        n_samples=int(sampling.get("n_samples", 100_000)),
        workers=sampling.get("workers"),
        nodes=int(measure.get("nodes", 48)),
        output=raw.get("output"),
        raw=raw,
    )


def run_tasks(
    fn: Callable[[Any], Any],
    payloads: Iterable[Any],
    workers: int = 1,
    progress: Optional[Callable[[int], None]] = None,
) -> list:
    """Run pure tasks inline or on a process pool; results come back in payload order."""
    payloads = list(payloads)
    if workers <= 1 or len(payloads) <= 1:
        results = []
        for payload in payloads:
            results.append(fn(payload))
            if progress:
                progress(1)
        return results

    results: list = [None] * len(payloads)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(fn, payload): i for i, payload in enumerate(payloads)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
            if progress:
                progress(1)
    return results


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write rows with floats in repr form; returns the number of rows."""
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
            count += 1
    return count


@dataclass
class Check:
    name: str
    passed: Optional[bool]
    values: dict[str, Any]


@dataclass
class Report:
    """Structured plain-text report: column docs, then one section per check, then the overall status."""

    experiment: str
    seed: int
    columns: dict[str, dict[str, str]] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    partial: bool = False

    def document(self, csv_name: str, columns: dict[str, str]) -> None:
        self.columns[csv_name] = columns

    def check(self, name: str, passed: bool, **values: Any) -> bool:
        self.checks.append(Check(name, bool(passed), values))
        return bool(passed)

    def info(self, name: str, **values: Any) -> None:
        self.checks.append(Check(name, None, values))

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def passed(self) -> bool:
        return not self.partial and all(c.passed is not False for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 2

    def render(self) -> str:
        lines = ["# reditus report", f"experiment: {self.experiment}", f"seed: {self.seed}", ""]
        for csv_name, columns in self.columns.items():
            lines.append(f"[columns {csv_name}]")
            lines.extend(f"{column}: {doc}" for column, doc in columns.items())
            lines.append("")
        for check in self.checks:
            lines.append(f"[{'check' if check.passed is not None else 'info'} {check.name}]")
            lines.extend(f"{key}: {_cell(value)}" for key, value in check.values.items())
            if check.passed is not None:
                lines.append(f"status: {'PASS' if check.passed else 'FAIL'}")
            lines.append("")
        lines.extend(f"note: {text}" for text in self.notes)
        if self.partial:
            lines.append("partial: true")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / REPORT_NAME
        path.write_text(self.render())
        return path
