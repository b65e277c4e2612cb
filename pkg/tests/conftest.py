from __future__ import annotations

import pytest


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.ok = None
        self.detail = "did not complete"

    def check(self, ok, detail=""):
        self.ok = bool(ok)
        self.detail = detail
        return self.ok


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def criterion(request):
    """``crit = criterion(n, title)``; ``crit.check(ok, detail)`` records the verdict."""
    made = []

    def make(number, title):
        c = _Criterion(request.config._acceptance, number, title)
        made.append(c)
        return c

    yield make
    for c in made:
        request.config._acceptance.append((c.number, c.title, bool(c.ok), c.detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(config._acceptance, key=lambda r: r[0])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in rows:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:2d}. {title}: {detail}")
