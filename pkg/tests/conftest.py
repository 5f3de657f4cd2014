"""Collects acceptance verdicts and prints them after the run."""

import contextlib
import time

VERDICTS: dict = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS if the block finishes, FAIL (and re-raise) otherwise."""
    t0 = time.perf_counter()
    notes: list = []
    try:
        yield notes
    except BaseException as exc:
        VERDICTS[number] = f"criterion {number} FAIL {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        print(VERDICTS[number])
        raise
    detail = "; ".join(notes)
    VERDICTS[number] = f"criterion {number} PASS {title} ({time.perf_counter() - t0:.1f}s){': ' + detail if detail else ''}"
    print(VERDICTS[number])


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
