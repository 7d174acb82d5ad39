import time
from contextlib import contextmanager

import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Context manager that times a block and reports ``criterion N: PASS|FAIL``.

    A block that finishes but overruns ``budget_s`` counts as a failure.
    """

    @contextmanager
    def run(number: int, title: str, budget_s: float | None = None):
        start = time.perf_counter()
        finished = False
        try:
            yield
            finished = True
        finally:
            elapsed = time.perf_counter() - start
            over = budget_s is not None and elapsed >= budget_s
            status = "PASS" if finished and not over else "FAIL"
            timing = f"{elapsed:.1f}s" + (f" of {budget_s:.0f}s budget" if budget_s else "")
            line = f"criterion {number}: {status}  {title} ({timing})"
            _CRITERIA.append(line)
            with capsys.disabled():
                print(f"\n{line}")
        if over:
            pytest.fail(f"criterion {number} took {elapsed:.1f}s; budget is {budget_s:.0f}s")

    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
