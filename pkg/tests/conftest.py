"""Shared pytest wiring: the acceptance suite records one line per criterion
and the terminal summary replays them, so a plain `pytest -v` run shows the
measured value next to each bound even when stdout capture is on."""
import pytest


def pytest_configure(config):
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """criterion(tag, measured, op, threshold) -> records, prints, asserts."""

    def record(tag, measured, op, threshold, ok):
        line = f"{tag:<44s} {measured} {op} {threshold} {'PASS' if ok else 'FAIL'}"
        request.config._criterion_lines.append(line)
        print(line)
        assert ok, line

    return record
