import pytest

from interpgnn import tensorcore as tc

import acceptance_log


@pytest.fixture(autouse=True)
def checked_mode():
    """Tests run with NaN/Inf guards on."""
    prev = tc.is_checked()
    tc.set_checked(True)
    yield
    tc.set_checked(prev)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(acceptance_log.line(n))
