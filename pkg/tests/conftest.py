import numpy as np
import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body fills in the detail and verdict."""

    class Line:
        def __init__(self, number: int, title: str):
            self.number, self.title = number, title
            self.detail = ""
            self.ok = None

        def done(self, ok: bool, detail: str) -> bool:
            self.ok, self.detail = bool(ok), detail
            return self.ok

    lines = []

    def make(number: int, title: str) -> Line:
        line = Line(number, title)
        lines.append(line)
        return line

    yield make
    for line in lines:
        verdict = "PASS" if line.ok else "FAIL"
        if line.ok is None:
            verdict, line.detail = "FAIL", line.detail or "did not finish"
        _CRITERIA[line.number] = f"{verdict}  criterion {line.number:>2}: {line.title} ({line.detail})"
        print("\n" + _CRITERIA[line.number])


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
