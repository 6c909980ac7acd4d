import sys

import numpy as np
import pytest

from crossdiff.fvsolver import BoundaryData, ModelParams, project_initial, run_trajectory
from crossdiff.mesh import build_structured_mesh
from crossdiff.reconstruct import reconstruct_trajectory


def _species_init(x, y):
    return np.array([0.1 + 0.1 * x + 0.05 * x * (1 - x) * np.cos(3 * y), 0.2 - 0.05 * x + 0.02 * np.sin(2 * y)])


def small_trajectory(z=0.0, n=4, steps=3, sources=None, charge=None):
    mesh = build_structured_mesh(n)
    params = ModelParams(n=2, z=z, permanent_charge=charge, sources=sources)
    bd = BoundaryData.from_species([[0.1, 0.2], [0.2, 0.15]], [0.0, 0.3 * z])
    init = project_initial(mesh, params, bd, _species_init)
    return run_trajectory(mesh, params, bd, init, np.linspace(0.0, 0.5, steps + 1))


@pytest.fixture(scope="session")
def traj_reduced():
    return small_trajectory(0.0)


@pytest.fixture(scope="session")
def traj_general():
    return small_trajectory(1.0)


@pytest.fixture(scope="session")
def rec_reduced(traj_reduced):
    return reconstruct_trajectory(traj_reduced)


@pytest.fixture(scope="session")
def rec_general(traj_general):
    return reconstruct_trajectory(traj_general)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERIA", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
