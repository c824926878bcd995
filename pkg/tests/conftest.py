import numpy as np
import pytest

from crowdmap.map_model import V, ElementClass, MapElement, VectorMap


def line_element(eid, cls, start, end, scale=0.1, confidence=1.0):
    pts = np.linspace(start, end, V)
    return MapElement(eid, ElementClass(cls), pts, scale, confidence)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_world():
    """Two boundaries, a divider and a crosswalk around the origin."""
    els = [
        line_element("bou-a", "bou", (-30.0, -7.0), (30.0, -7.0)),
        line_element("bou-b", "bou", (-30.0, 7.0), (30.0, 7.0)),
        line_element("div-a", "div", (-25.0, 0.0), (-5.0, 0.0)),
        line_element("div-b", "div", (5.0, 3.5), (25.0, 3.5)),
        line_element("ped-a", "ped", (10.0, -6.5), (10.0, 6.5)),
    ]
    return VectorMap(tuple(els), version=1, frame="world")


# acceptance results, filled by test_acceptance.py and printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
