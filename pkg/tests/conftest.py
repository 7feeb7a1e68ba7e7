import pytest

from intformer import synthgen

_criteria: dict = {}


@pytest.fixture(scope="session")
def full_year():
    """Full eight-intersection roster, one year, seed 2021."""
    return synthgen.generate_snapshots(synthgen.study_geometries(), seed=2021)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    if report.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        notes = f"  ({', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{notes}")
