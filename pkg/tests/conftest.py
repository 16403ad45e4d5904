from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from atomcode.store import make_table, save_table

settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=20, deadline=None)
settings.load_profile("ci")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def make_csv(tmp_path):
    """Write a table to ``tmp_path`` and return its path."""

    def _make(header, rows, name="table.csv"):
        path = tmp_path / name
        save_table(make_table(header, rows), path)
        return path

    return _make


@pytest.fixture
def interviews(tmp_path):
    """A private copy of the bundled 23-row interview table."""
    path = tmp_path / "interviews.csv"
    path.write_bytes((FIXTURES / "interviews_23.csv").read_bytes())
    return path


@pytest.fixture
def small_table(make_csv):
    return make_csv(
        ["doc_id", "data", "context_1"],
        [["d1", "first segment", "Grade 8"], ["d2", "second segment", "Grade 8"], ["d3", "third", "Grade 9"]],
    )


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, float | None]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or report.failed:
        status = "FAIL" if report.failed else ("PASS" if report.passed else "SKIP")
        _ACCEPTANCE[number] = (status, title, report.duration if report.when == "call" else None)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, duration = _ACCEPTANCE[number]
        took = f" ({duration:.2f}s)" if duration is not None else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {title}{took}")
