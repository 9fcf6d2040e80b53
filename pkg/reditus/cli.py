"""Reditus CLI - run hitting-time experiments and write their artifacts."""

import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from .core import Report, get_config_path
from .errors import ConfigError, ReditusError
from .experiments import EXPERIMENTS, default_config, list_builtins, load_experiment, parse, run

app = typer.Typer(help="Reditus - hitting-time experiments for shifts, expanding maps and GDMS limit sets")
console = Console()

CONFIG_ERROR = 3


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def print_builtins() -> None:
    """Print the registry of systems, potentials and experiments."""
    registry = list_builtins()

    table = Table(show_header=True, header_style="bold magenta", title="Systems")
    table.add_column("Kind", style="cyan")
    table.add_column("Name", style="green")
    table.add_column("Parameters", style="yellow")
    for kind, systems in registry["systems"].items():
        for name, params in systems.items():
            table.add_row(kind, name, ", ".join(params) or "-")
    console.print(table)

    table = Table(show_header=True, header_style="bold magenta", title="Potentials")
    table.add_column("Name", style="cyan")
    table.add_column("Parameters", style="yellow")
    for name, params in registry["potentials"].items():
        table.add_row(name, ", ".join(params) or "-")
    console.print(table)

    table = Table(show_header=True, header_style="bold magenta", title="Experiments")
    table.add_column("Name", style="cyan")
    table.add_column("Description")
    table.add_column("Parameters", style="yellow")
    for name, experiment in EXPERIMENTS.items():
        table.add_row(name, experiment.description, ", ".join(registry["experiments"][name]))
    console.print(table)


def print_report(report: Report, out_dir: Path) -> None:
    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Check", style="cyan")
    table.add_column("Status", justify="center")
    for check in report.checks:
        if check.passed is None:
            continue
        table.add_row(check.name, "[green]PASS[/green]" if check.passed else "[red]FAIL[/red]")
    console.print(table)
    if report.partial:
        console.print("[yellow]Budget exhausted, report is partial[/yellow]")
    if report.passed:
        console.print(f"[green]✓[/green] {report.experiment}: all checks passed, artifacts in {out_dir}")
    else:
        console.print(f"[red]✗[/red] {report.experiment}: some checks failed, see {out_dir / 'report.txt'}")


def list_callback(value: bool) -> None:
    if value:
        print_builtins()
        raise typer.Exit()


@app.callback()
def callback(
    list_: bool = typer.Option(
        False, "--list", help="List built-in systems, potentials and experiments", callback=list_callback, is_eager=True
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress of the numerical routines"),
) -> None:
    """Reditus - hitting-time experiments."""
    setup_logging(verbose)


@app.command("list-builtins")
def list_builtins_command() -> None:
    """List built-in systems, potentials and experiments."""
    print_builtins()


def run_command(
    kind: str,
    config: Optional[Path],
    out: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
) -> None:
    try:
        if config is not None:
            if not config.exists():
                console.print(f"[red]Error:[/red] Config file {config} does not exist")
                raise typer.Exit(CONFIG_ERROR)
            experiment = load_experiment(config, seed)
        else:
            experiment = parse(default_config(kind, seed or 0))
    except ConfigError as e:
        where = f"{config}:" if config is not None else ""
        console.print(f"[red]Error:[/red] {where}{e}")
        raise typer.Exit(CONFIG_ERROR) from None

    if experiment.kind != kind:
        console.print(f"[red]Error:[/red] config describes experiment '{experiment.kind}', not '{kind}'")
        raise typer.Exit(CONFIG_ERROR)

    out_dir = out or Path(experiment.output or f"reditus-{kind}")
    n_workers = workers or experiment.workers or 1
    console.print(f"[cyan]Running {kind}[/cyan] (seed {experiment.seed}, {n_workers} worker(s))")

    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed} tasks"),
            TimeElapsedColumn(),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task(f"[cyan]{kind}...", total=None)
            report = run(experiment, out_dir, n_workers, lambda n: progress.update(task, advance=n))
    except ConfigError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(CONFIG_ERROR) from None
    except ReditusError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(2) from None

    print_report(report, out_dir)
    console.print(f"[green]✓[/green] Configuration saved to {get_config_path(out_dir)}")
    raise typer.Exit(report.exit_code)


def make_command(kind: str, description: str) -> Callable[..., None]:
    def command(
        config: Optional[Path] = typer.Option(None, "--config", "-c", help="Experiment config (TOML)"),
        out: Optional[Path] = typer.Option(None, "--out", "-o", help="Artifact directory"),
        seed: Optional[int] = typer.Option(None, "--seed", help="Master seed, overrides the config", min=0),
        workers: Optional[int] = typer.Option(
            None, "--workers", "-w", help="Worker processes", envvar="REDITUS_WORKERS", min=1
        ),
    ) -> None:
        run_command(kind, config, out, seed, workers)

    command.__doc__ = description[0].upper() + description[1:] + "."
    return command


for _name, _experiment in EXPERIMENTS.items():
    app.command(_name)(make_command(_name, _experiment.description))


def main() -> None:
    """Main entry point for the CLI."""
    if len(sys.argv) == 1:
        app(["--help"])
    else:
        app()


if __name__ == "__main__":
    main()
