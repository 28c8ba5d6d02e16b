import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def record(self, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        line = f"criterion {self.number} [{status}] {self.title}" + (f": {detail}" if detail else "")
        _RESULTS[self.number] = (passed, line)
        print(line)


@pytest.fixture
def criterion(request):
    """Per-criterion recorder; a criterion test that errors before recording is listed as FAIL."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    rec = CriterionRecorder(number, title)
    yield rec
    if number not in _RESULTS:
        _RESULTS[number] = (False, f"criterion {number} [FAIL] {title}: test did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[n][1])
