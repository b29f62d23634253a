import pytest

from peakflow.ground_state import ProblemParams, cached_ground_state

# criterion number -> (passed, detail), filled by tests marked ``criterion``
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.fixture
def detail(request):
    """Callable recording a one-line detail for the current acceptance test."""
    marker = request.node.get_closest_marker("criterion")
    box = {}

    def record(text):
        box["text"] = text

    yield record
    if marker is not None:
        CRITERIA.setdefault(marker.args[0], [None, ""])[1] = box.get("text", "")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry = CRITERIA.setdefault(marker.args[0], [None, ""])
        entry[0] = rep.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, text = CRITERIA[n]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")


@pytest.fixture(scope="session")
def profile_2d():
    return cached_ground_state(ProblemParams(2, 1.5, 3.0))


@pytest.fixture(scope="session")
def profile_soliton():
    return cached_ground_state(ProblemParams(1, 2.0, 4.0))
