import pytest

_CRITERIA = {}


class CriterionLog:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(self, number, title, passed, detail=""):
        _CRITERIA[number] = (title, bool(passed), detail)
        return passed


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {number:2d}: {title} :: {detail}")
