import os
import sys
import time
from contextlib import contextmanager

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = []


class _Record:
    detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec:`` logs one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def run(number, title):
        rec = _Record()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _line(number, title, False, rec.detail or msg, time.perf_counter() - t0)
            raise
        _line(number, title, True, rec.detail, time.perf_counter() - t0)

    return run


def _line(number, title, passed, detail, seconds):
    text = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title} [{seconds:.1f}s] {detail}".rstrip()
    _ACCEPTANCE.append((number, text))
    print(text)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(_ACCEPTANCE):
            terminalreporter.write_line(text)
