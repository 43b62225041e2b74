import numpy as np
import pytest

from pcnav.geometry import Dem, PointCloud, dem_to_pointcloud

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def planar_dem(a=0.0, b=0.0, c=0.0, size=20.0, cell=0.25, origin=(0.0, 0.0)):
    n = int(round(size / cell)) + 1
    xs = origin[0] + np.arange(n) * cell
    ys = origin[1] + np.arange(n) * cell
    gx, gy = np.meshgrid(xs, ys)
    return Dem(origin, cell, a * gx + b * gy + c)


def grid_cloud(f, size=6.0, spacing=0.1, center=(0.0, 0.0)):
    """Regular lattice of points with z = f(x, y), centred on ``center``."""
    g = np.arange(-size / 2, size / 2 + 1e-9, spacing)
    gx, gy = np.meshgrid(g + center[0], g + center[1])
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), np.ravel(f(gx, gy))]))


@pytest.fixture(scope="session")
def flat_dem():
    return planar_dem(size=60.0)


@pytest.fixture(scope="session")
def flat_cloud(flat_dem):
    return dem_to_pointcloud(flat_dem, 0.125)
