import sys
import tomllib
from pathlib import Path

from run_checks import check_commands


def _tools(commands):
    return [c[2] for c in commands]


def test_fix_mode_rewrites_files():
    commands = check_commands()
    assert _tools(commands) == ["ruff", "isort", "black", "pytest"]
    assert all(c[:2] == [sys.executable, "-m"] for c in commands)
    assert "--fix" in commands[0]
    assert "--check-only" not in commands[1]
    assert "--check" not in commands[2]


def test_check_mode_only_reports():
    ruff, isort, black, pytest_cmd = check_commands(fix=False)
    assert "--fix" not in ruff
    assert "--check-only" in isort
    assert "--check" in black
    assert "--runslow" not in pytest_cmd


def test_slow_runs_and_extra_pytest_arguments():
    pytest_cmd = check_commands(slow=True, pytest_args=["-k", "td"])[-1]
    assert pytest_cmd[-3:] == ["--runslow", "-k", "td"]


def test_project_declares_the_interpreter_it_needs():
    with open(Path(__file__).parents[1] / "pyproject.toml", "rb") as f:
        project = tomllib.load(f)["project"]
    assert project["requires-python"] == ">=3.11"
    assert sys.version_info >= (3, 11)
