import functools
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from app.api.runner import RunStatus, load_scenario, run_scenario, scenario_settings
from app.api.scenario import ScenarioError, parse_scenario
from app.core.config import settings
from app.main import cli

SCENARIOS = Path(__file__).resolve().parent / "scenarios"
GOLDEN = SCENARIOS / "golden_digests.yaml"
SHIPPED = sorted(SCENARIOS.glob("*.scn"))

FAILING = """\
seed 1
difficulty 8
userreg-difficulty 6
node n1 10.0.0.1 7000
register ghost n1
advance 2
expect-registered ghost
"""

RUNAWAY = """\
max-ticks 10
node n1 10.0.0.1 7000
advance 100
"""


@functools.cache
def _report(path: Path, seed: int | None = None):
    return run_scenario(load_scenario(path), seed=seed)


# ---- parsing ------------------------------------------------------------------


def test_parse_full_grammar():
    scenario = parse_scenario(
        "# comment line\n"
        "seed 5\n"
        "latency 2 4\n"
        "drop 0.1\n"
        "\n"
        "node n1 10.0.0.1 7000 hashrate 3  # trailing comment\n"
        "node n2 10.0.0.2 7000\n"
        "register alice n1 name alicia\n"
        "mine n1\n"
        "mine n1 2\n"
        "automine n2 on\n"
        "post alice hello #p2p world\n"
        "partition n1 | n2\n"
        "expect-registered alicia\n",
        name="grammar",
    )
    header = scenario.header
    assert (header.seed, header.latency_min, header.latency_max, header.drop) == (5, 2, 4, 0.1)
    node, _, register, mine_one, mine_two, automine, post, partition, check = scenario.directives
    assert node.args == ["n1", "10.0.0.1", 7000] and node.options == {"hashrate": 3}
    assert register.options == {"name": "alicia"}
    assert mine_one.args == ["n1"] and mine_two.args == ["n1", 2]
    assert automine.args == ["n2", "on"]
    assert post.args == ["alice", "hello #p2p world"]
    assert partition.cells == [["n1"], ["n2"]]
    assert [d.name for d in scenario.assertions] == ["expect-registered"]
    assert check.describe() == "expect-registered alicia"
    assert partition.describe() == "partition n1 | n2"


@pytest.mark.parametrize(
    ("text", "line", "column", "expected"),
    [
        ("explode now\n", 1, 1, "a header keyword or directive"),
        ("seed 5\nnode n1 10.0.0.1 seven\n", 2, 18, "a non-negative integer"),
        ("node n1 300.1.1.1 7000\n", 1, 9, "an IPv4 address"),
        ("node n1 10.0.0.1 7000\nseed 3\n", 2, 1, "a directive (header lines come first)"),
        ("node n1 10.0.0.1 7000\nregister alice n1\npost alice\n", 3, 12, "message text for 'post'"),
        ("node n1 10.0.0.1 7000\nautomine n1 maybe\n", 2, 13, "on or off"),
        ("node n1 10.0.0.1 7000\nnode n2 10.0.0.2 7000\npartition n1\n", 3, 11, "at least two cells separated by '|'"),
        ("node n1 10.0.0.1 7000 speed 3\n", 1, 23, "'hashrate'"),
        ("latency 1\n", 1, 10, "2 argument(s) for 'latency'"),
    ],
)
def test_parse_errors_point_at_the_problem(text, line, column, expected):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert (info.value.line, info.value.column, info.value.expected) == (line, column, expected)
    assert str(info.value) == f"line {line}, column {column}: expected {expected}"


@pytest.mark.parametrize(
    "text",
    [
        "latency 5 2\n",
        "drop 1.5\n",
        "difficulty 0\n",
        "register alice n9\n",
        "post alice hello\nnode n1 10.0.0.1 7000\nregister alice n1\n",
        "node n1 10.0.0.1 7000\nnode n1 10.0.0.2 7000\n",
        "node n1 10.0.0.1 7000\nnode n2 10.0.0.1 7000\n",
        "node n1 10.0.0.1 0\n",
        "node n1 10.0.0.1 70000\n",
        "node n1 10.0.0.1 7000\nregister alice n1\nregister alice n1\n",
        "node n1 10.0.0.1 7000\nfetch n1 bob 1\n",
        "node n1 10.0.0.1 7000\nregister alice n1 name alicia\nexpect-registered alice\n",
    ],
)
def test_invalid_scenarios_rejected(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_header_and_flags_shape_settings():
    scenario = parse_scenario("latency 2 9\ndifficulty 10\nuserreg-difficulty 5\nmax-ticks 500\n")
    cfg = scenario_settings(scenario)
    assert (cfg.SIM_LATENCY_MIN, cfg.SIM_LATENCY_MAX) == (2, 9)
    assert cfg.INITIAL_BLOCK_DIFFICULTY == 10
    assert cfg.USERREG_DIFFICULTY == 5
    assert cfg.SIM_MAX_TICKS == 500
    assert scenario_settings(scenario, difficulty_bits=7).INITIAL_BLOCK_DIFFICULTY == 7
    assert scenario_settings(parse_scenario("")).INITIAL_BLOCK_DIFFICULTY == settings.INITIAL_BLOCK_DIFFICULTY


# ---- shipped scenarios --------------------------------------------------------


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_shipped_scenario_passes(path):
    report = _report(path)
    failures = [a for a in report.assertions if not a.passed]
    assert report.status is RunStatus.PASS, report.render()
    assert not failures
    assert report.assertions
    assert report.exit_code == 0


def test_runs_are_reproducible():
    path = SCENARIOS / "post_delivery.scn"
    again = run_scenario(load_scenario(path))
    assert again.trace_digest == _report(path).trace_digest
    assert again.render() == _report(path).render()


def test_seed_override_changes_the_run():
    path = SCENARIOS / "post_delivery.scn"
    header_seed = load_scenario(path).header.seed
    other = _report(path, seed=header_seed + 1)
    assert other.seed == header_seed + 1
    assert other.trace_digest != _report(path).trace_digest


def test_golden_digests():
    """Every shipped scenario has a recorded digest and still reproduces it."""
    golden = yaml.safe_load(GOLDEN.read_text(encoding="utf-8")) or {}
    current = {path.stem: _report(path).trace_digest for path in SHIPPED}
    missing = sorted(set(current) - set(golden))
    assert not missing, f"record with: python -m app.main digests scenarios/*.scn --write scenarios/{GOLDEN.name}"
    drifted = {name: digest for name, digest in current.items() if golden[name] != digest}
    assert not drifted


@pytest.mark.parametrize("seed", range(1, 21))
def test_uniqueness_survives_forks_for_any_seed(seed):
    report = _report(SCENARIOS / "uniqueness_fork.scn", seed=seed)
    assert report.status is RunStatus.PASS, report.render()


def test_failed_assertion_and_halt(tmp_path):
    failing = tmp_path / "failing.scn"
    failing.write_text(FAILING, encoding="utf-8")
    report = run_scenario(load_scenario(failing))
    assert report.status is RunStatus.FAIL and report.exit_code == 1
    assert "assert.7: fail" in report.render()

    runaway = tmp_path / "runaway.scn"
    runaway.write_text(RUNAWAY, encoding="utf-8")
    report = run_scenario(load_scenario(runaway))
    assert report.status is RunStatus.HALTED and report.exit_code == 3
    assert report.error


def test_report_layout():
    lines = _report(SCENARIOS / "post_delivery.scn").render().splitlines()
    assert lines[0] == "scenario: post_delivery"
    assert lines[1] == "seed: 11"
    assert lines[2] == "status: pass"
    assert all(": " in line for line in lines)
    metric_keys = [line.split(":")[0] for line in lines if line.startswith("metric.")]
    assert metric_keys == sorted(metric_keys)


# ---- command line -------------------------------------------------------------


def test_cli_run_writes_report_and_trace(tmp_path):
    runner = CliRunner()
    trace = tmp_path / "run.trace"
    report = tmp_path / "report.txt"
    path = SCENARIOS / "post_delivery.scn"
    result = runner.invoke(cli, ["run", str(path), "--trace", str(trace), "--report", str(report)])
    assert result.exit_code == 0, result.output
    assert result.stdout == report.read_text(encoding="utf-8")
    assert "status: pass" in result.stdout
    assert trace.exists()

    stats = runner.invoke(cli, ["stats", str(trace)])
    assert stats.exit_code == 0
    assert stats.stdout.startswith("events: ")
    assert "kind.spawn: 6" in stats.stdout


def test_cli_run_many_into_trace_directory(tmp_path):
    failing = tmp_path / "failing.scn"
    failing.write_text(FAILING, encoding="utf-8")
    traces = tmp_path / "traces"
    result = CliRunner().invoke(
        cli, ["run", str(SCENARIOS / "mentions_listener.scn"), str(failing), "--trace", str(traces)]
    )
    assert result.exit_code == 1
    assert sorted(p.name for p in traces.iterdir()) == ["failing.trace", "mentions_listener.trace"]
    assert result.stdout.count("scenario: ") == 2


def test_cli_check(tmp_path):
    runner = CliRunner()
    good = runner.invoke(cli, ["check", str(SCENARIOS / "post_delivery.scn")])
    assert good.exit_code == 0
    assert "ok (" in good.stdout

    bad = tmp_path / "bad.scn"
    bad.write_text("seed 1\nnode n1 10.0.0.1 seven\n", encoding="utf-8")
    result = runner.invoke(cli, ["check", str(bad)])
    assert result.exit_code == 2
    assert "line 2, column 18" in result.stderr


def test_cli_run_parse_error_exit(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text("explode\n", encoding="utf-8")
    result = CliRunner().invoke(cli, ["run", str(bad)])
    assert result.exit_code == 2


def test_cli_digests_records_without_touching_others(tmp_path):
    golden = tmp_path / "golden.yaml"
    golden.write_text("other_scenario: abc\n", encoding="utf-8")
    path = SCENARIOS / "post_delivery.scn"
    result = CliRunner().invoke(cli, ["digests", str(path), "--write", str(golden)])
    assert result.exit_code == 0
    digest = _report(path).trace_digest
    assert result.stdout == f"post_delivery: {digest}\n"
    assert yaml.safe_load(golden.read_text(encoding="utf-8")) == {"other_scenario": "abc", "post_delivery": digest}


def test_cli_digests_refuses_failing_runs(tmp_path):
    failing = tmp_path / "failing.scn"
    failing.write_text(FAILING, encoding="utf-8")
    golden = tmp_path / "golden.yaml"
    result = CliRunner().invoke(cli, ["digests", str(failing), "--write", str(golden)])
    assert result.exit_code == 1
    assert not golden.exists()
