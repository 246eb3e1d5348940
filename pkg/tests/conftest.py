import math

import numpy as np
import pytest

from pillarnet.geom import Box3D, BoxBEV
from pillarnet.grid import GridSpec

# 24 m square at the base pillar size: 320 x 320 base cells, 40 x 40 head cells
SMALL_SPEC = GridSpec((-12.0, 12.0), (-12.0, 12.0), (-5.0, 3.0), (0.075, 0.075))

# narrow widths keep the many-configuration network tests fast
NARROW = dict(channels={1: 8, 2: 8, 4: 16, 8: 16, 16: 16}, neck_channels=8, pillar_channels=8,
              head_channels=8)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bev(rng, lo=-5.0, hi=5.0, ext=(0.5, 5.0)) -> BoxBEV:
    return BoxBEV(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(*ext), rng.uniform(*ext),
                  rng.uniform(-math.pi, math.pi))


def random_box3d(rng, near: Box3D = None, spread=1.5) -> Box3D:
    if near is None:
        c = rng.uniform(-1, 1, 3)
    else:
        c = np.array([near.cx, near.cy, near.cz]) + rng.uniform(-spread, spread, 3)
    return Box3D(c[0], c[1], c[2], *rng.uniform(0.5, 4.0, 3), rng.uniform(-math.pi, math.pi))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""
    def _report(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
