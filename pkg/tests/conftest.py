import numpy as np
import pytest

from geotomo.forward import assemble_A, build_grid
from geotomo.geometry import ConformalMetric
from geotomo.mesh import generate_disk_mesh, mass_matrix


@pytest.fixture(scope="session")
def euclid():
    return ConformalMetric.euclidean()


@pytest.fixture(scope="session")
def bump_metric():
    return ConformalMetric.paper_bump()


@pytest.fixture(scope="session")
def mesh_small():
    return generate_disk_mesh(200)


@pytest.fixture(scope="session")
def mesh_desk():
    return generate_disk_mesh(800)


@pytest.fixture(scope="session")
def grid_small():
    return build_grid(16, 24)


@pytest.fixture(scope="session")
def grid_desk():
    return build_grid(32, 64)


@pytest.fixture(scope="session")
def A_desk(mesh_desk, grid_desk, euclid):
    return assemble_A(mesh_desk, grid_desk, euclid, 1e-3)


@pytest.fixture(scope="session")
def mass_desk(mesh_desk):
    return mass_matrix(mesh_desk)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """``record(number, passed, detail)``; parts of one criterion are merged."""

    def record(number, passed, detail):
        prev = _ACCEPTANCE.get(number)
        if prev is None:
            _ACCEPTANCE[number] = (bool(passed), detail)
        else:
            _ACCEPTANCE[number] = (prev[0] and bool(passed), prev[1] + "; " + detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
