import contextlib
import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


_criteria: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""
    @contextlib.contextmanager
    def check(number: int, title: str):
        notes: list[str] = []
        ok = False
        try:
            yield notes
            ok = True
        finally:
            line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
            if notes:
                line += " | " + "; ".join(notes)
            _criteria.append(line)
            with capsys.disabled():
                print(f"\n{line}")
    return check


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
