from __future__ import annotations

import numpy as np
import pytest

from lanegeom.geometry import Lane, build_grid


@pytest.fixture(scope="session")
def grid():
    return build_grid()


def curved_xs(rng, grid, slope=0.6, curve=1.5e-3, x_range=(250.0, 550.0)):
    """Random smooth lane on ``grid`` rows: offset + slope + curvature."""
    t = grid.height - grid.rows
    return (rng.uniform(*x_range) + rng.uniform(-slope, slope) * t
            + rng.uniform(-curve, curve) * t * t)


def vertical_lane(grid, x, start=0, length=None):
    length = grid.n_points - start if length is None else length
    return Lane(np.full(grid.n_points, float(x)), start, length)


ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    """Store the pass/fail line for one acceptance criterion and print it."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
