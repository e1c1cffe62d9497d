from __future__ import annotations

import pytest

from clocktree.boundary_law import build_chain
from clocktree.model import constants, potts


@pytest.fixture(scope="session")
def potts_chain():
    """Chains for Potts q=3, d=2, A={0,1} keyed by beta."""
    cache = {}

    def get(beta):
        if beta not in cache:
            m = potts(3, 2, beta)
            cache[beta] = (m, build_chain(m, [0, 1]), constants(m, 2))
        return cache[beta]

    return get


_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _CRITERIA.setdefault(marker[0], [marker[1], True, ""])
        if report.outcome != "passed":
            entry[1] = False
            entry[2] = report.nodeid.split("::")[-1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok, where = _CRITERIA[num]
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if not ok:
            line += f"  (failed: {where})"
        terminalreporter.write_line(line)
