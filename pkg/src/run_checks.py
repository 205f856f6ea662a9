"""
Developer checks: lint, import order, formatting and the test suite.

    python src/run_checks.py            fix in place, then run the fast tests
    python src/run_checks.py --check    report only (CI)
    python src/run_checks.py --slow     include the long simulation runs
"""

import argparse
import subprocess
import sys


def check_commands(fix: bool = True, slow: bool = False, pytest_args: list[str] | None = None) -> list[list[str]]:
    python = [sys.executable, "-m"]
    commands = [
        python + ["ruff", "check", "."] + (["--fix"] if fix else []),
        python + ["isort", "."] + ([] if fix else ["--check-only", "--diff"]),
        python + ["black", "."] + ([] if fix else ["--check"]),
        python + ["pytest", "-q"] + (["--runslow"] if slow else []) + list(pytest_args or []),
    ]
    return commands


def run_command(command: list[str]) -> bool:
    """Runs one check and prints its output; returns whether it passed."""
    label = " ".join(command[2:])
    result = subprocess.run(command, text=True, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    if result.returncode == 0:
        print(f"'{label}' passed.")
        return True
    print(f"'{label}' failed with exit code {result.returncode}:")
    print(result.stdout)
    print(result.stderr)
    return False


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run linters, formatters and tests")
    parser.add_argument("--check", action="store_true", help="Do not modify files")
    parser.add_argument("--slow", action="store_true", help="Also run tests marked slow")
    args, pytest_args = parser.parse_known_args(argv)
    failed = [c for c in check_commands(not args.check, args.slow, pytest_args) if not run_command(c)]
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
