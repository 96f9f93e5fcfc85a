import numpy as np
import pytest

from gto import autodiff as ad
from gto.meshgraph import Mesh


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def square_mesh():
    """Two triangles on the unit square; corners 0,1 wall, 2,3 interior."""
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh(coords, np.array([[0, 1, 2], [0, 2, 3]]), np.array([3, 3, 0, 0]))


def grid_mesh(nx, ny, boundary=True):
    """Structured triangulation of an ``nx`` by ``ny`` node grid."""
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny))
    coords = np.stack([xs.ravel(), ys.ravel()], 1)
    cells = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            cells += [[a, a + 1, a + nx + 1], [a, a + nx + 1, a + nx]]
    node_type = np.zeros(nx * ny, dtype=int)
    if boundary:
        edge = (coords[:, 0] == 0) | (coords[:, 0] == 1) | (coords[:, 1] == 0) | (coords[:, 1] == 1)
        node_type[edge] = 3
    return Mesh(coords, np.array(cells), node_type)


ACCEPTANCE = {}


def record(number, passed, detail):
    """Remember one acceptance outcome; the terminal summary prints them all."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
