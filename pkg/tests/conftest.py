import pytest

from invasim.model import ModelSpec

LV_C = [[1.0, 0.6], [0.5, 1.0]]


@pytest.fixture
def sir():
    return ModelSpec.sir(1.5, 1.0)


@pytest.fixture
def lv():
    return ModelSpec.lotka_volterra(2.0, 1.0, 3.0, 1.0, LV_C)


# acceptance verdicts, filled by test_acceptance and echoed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
