import pytest

# criterion number -> (passed, description); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, text):
    ACCEPTANCE[number] = (bool(passed), text)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {text}")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)
