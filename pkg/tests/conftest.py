import numpy as np
import pytest
from hypothesis import settings

from ral.tensor import set_default_dtype, set_debug_checks

settings.register_profile("ral", max_examples=60, deadline=None)
settings.load_profile("ral")

_ACCEPTANCE: list[str] = []


@pytest.fixture(autouse=True)
def _debug_checks():
    # every op verifies its output is finite while tests run
    set_debug_checks(True)
    set_default_dtype(np.float32)
    yield
    set_debug_checks(False)
    set_default_dtype(np.float32)


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        if detail:
            line += f" -- {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
