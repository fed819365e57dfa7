import pytest

from avbench.taxonomy import PAPER_SPEC, ManifestSpec, synthesize_manifest

SMALL_SPEC = ManifestSpec((30,) * 10, 200, (0.6, 0.2, 0.2), max_duration=30.0)
TINY_SPEC = ManifestSpec((4,) * 10, 30, (0.6, 0.2, 0.2), max_duration=25.0)


@pytest.fixture(scope="session")
def paper_manifest():
    return synthesize_manifest(0, PAPER_SPEC)


@pytest.fixture(scope="session")
def small_manifest():
    return synthesize_manifest(0, SMALL_SPEC)


@pytest.fixture(scope="session")
def tiny_manifest():
    return synthesize_manifest(3, TINY_SPEC)


_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(report.nodeid)
        if prev is None or prev[1] == "PASS":
            _criteria[report.nodeid] = (props["criterion"], "PASS" if report.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, status in sorted(_criteria.values()):
        terminalreporter.write_line(f"{status}  {label}")
