import logging
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import yaml

from app.api.runner import PARSE_ERROR_EXIT, RunReport, load_scenario, run_scenario
from app.api.scenario import ScenarioError
from app.core.config import settings
from app.core.logging import setup_logging
from app.services.simnet import SimulationError, read_trace

logger = logging.getLogger(__name__)


def _run_one(path: Path, seed: int | None, trace: Path | None, difficulty_bits: int | None) -> tuple[int, str]:
    """Worker entry point; returns (exit code, rendered report or error)."""
    try:
        scenario = load_scenario(path)
    except ScenarioError as e:
        return PARSE_ERROR_EXIT, f"{path}: {e}\n"
    report: RunReport = run_scenario(scenario, seed=seed, difficulty_bits=difficulty_bits, trace_path=trace)
    return report.exit_code, report.render()


def _trace_for(trace: Path | None, path: Path, many: bool) -> Path | None:
    if trace is None or not many:
        return trace
    return trace / f"{path.stem}.trace"


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL from the environment.")
def cli(log_level: str | None):
    """Deterministic simulation harness for the twister protocol."""
    setup_logging(log_level)


@cli.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=None, help="Replaces the seed from the scenario header.")
@click.option("--trace", type=click.Path(path_type=Path), default=None,
              help="Trace file (one scenario) or directory (several).")
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Also write the report to this file.")
@click.option("--difficulty-bits", type=click.IntRange(1, 64), default=None,
              help="Initial block difficulty for every node.")
@click.option("--jobs", type=click.IntRange(1), default=1, help="Scenarios run in parallel.")
def run(files: tuple[Path, ...], seed, trace, report, difficulty_bits, jobs):
    """Run scenario files and print a key: value report per file."""
    many = len(files) > 1
    if trace is not None and many:
        trace.mkdir(parents=True, exist_ok=True)
    logger.info("Running scenarios", extra={"count": len(files), "jobs": jobs, "env": settings.ENV})

    jobs_args = [(path, seed, _trace_for(trace, path, many), difficulty_bits) for path in files]
    if jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs_args)))
    else:
        results = [_run_one(*args) for args in jobs_args]

    output = "\n".join(text for _, text in results)
    click.echo(output, nl=False)
    if report is not None:
        report.write_text(output, encoding="utf-8", newline="\n")
    sys.exit(max(code for code, _ in results))


@cli.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def check(file: Path):
    """Parse and validate a scenario without running it."""
    try:
        scenario = load_scenario(file)
    except ScenarioError as e:
        click.echo(f"{file}: {e}", err=True)
        sys.exit(PARSE_ERROR_EXIT)
    click.echo(f"{file}: ok ({len(scenario.directives)} directives, {len(scenario.assertions)} assertions)")


@cli.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--write", "golden", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Record the digests into this YAML file, keeping entries for other scenarios.")
def digests(files: tuple[Path, ...], golden: Path | None):
    """Run scenarios at their header seed and print each trace digest."""
    current = {}
    for path in files:
        try:
            scenario = load_scenario(path)
        except ScenarioError as e:
            click.echo(f"{path}: {e}", err=True)
            sys.exit(PARSE_ERROR_EXIT)
        report = run_scenario(scenario)
        if report.exit_code != 0:
            click.echo(f"{path}: {report.status}, digest not recorded", err=True)
            sys.exit(report.exit_code)
        current[path.stem] = report.trace_digest
    for name, digest in sorted(current.items()):
        click.echo(f"{name}: {digest}")
    if golden is not None:
        recorded = yaml.safe_load(golden.read_text(encoding="utf-8")) if golden.exists() else None
        recorded = {**(recorded or {}), **current}
        golden.write_text(yaml.safe_dump(dict(sorted(recorded.items()))), encoding="utf-8", newline="\n")
        logger.info("Golden digests written", extra={"path": str(golden), "count": len(current)})


@cli.command()
@click.argument("trace", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def stats(trace: Path):
    """Summarise a trace file: events by kind and by node."""
    try:
        entries = read_trace(trace)
    except SimulationError as e:
        click.echo(f"{trace}: {e}", err=True)
        sys.exit(PARSE_ERROR_EXIT)
    by_kind = Counter(e.kind for e in entries)
    by_node = Counter(e.node for e in entries)
    click.echo(f"events: {len(entries)}")
    click.echo(f"last_tick: {entries[-1].tick if entries else 0}")
    for kind, count in sorted(by_kind.items()):
        click.echo(f"kind.{kind}: {count}")
    for node, count in sorted(by_node.items()):
        click.echo(f"node.{node}: {count}")


if __name__ == "__main__":
    cli()
