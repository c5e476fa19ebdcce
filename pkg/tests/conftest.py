"""Collects acceptance results and prints one PASS/FAIL line per criterion."""
import pytest

_RESULTS: dict[str, list[tuple[str, bool, list[str]]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number): acceptance criterion checked by the test")


@pytest.fixture
def note(request):
    """Append a detail line to the acceptance summary of the current test."""
    lines: list[str] = []
    request.node.acceptance_notes = lines
    return lines.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = getattr(item, "acceptance_notes", [])
        _RESULTS.setdefault(str(marker.args[0]), []).append((item.name, rep.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS, key=int):
        parts = _RESULTS[number]
        ok = all(passed for _, passed, _ in parts)
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}")
        for name, passed, notes in parts:
            tr.write_line(f"    {'PASS' if passed else 'FAIL'}  {name}")
            for n in notes:
                tr.write_line(f"          {n}")
