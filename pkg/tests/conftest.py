import pytest

_CRITERIA: dict = {}


class CriterionRecorder:
    """Records one pass/fail line per acceptance criterion before asserting."""

    def check(self, number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not rep.failed:
        return
    n = mark.args[0]
    if n not in _CRITERIA or _CRITERIA[n][0]:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else rep.when
        _CRITERIA[n] = (False, f"error: {msg[:160]}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
