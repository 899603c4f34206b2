from __future__ import annotations

import numpy as np
import pytest

from swimctl.config import parse_config
from swimctl.mesh import FLUID, SOLID, Space, build_disk_in_disk_mesh


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_disk_in_disk_mesh(0.5, 1.5, 0.3, extra_radii=(0.6, 1.2))


@pytest.fixture(scope="session")
def fluid_space(coarse_mesh):
    return Space(coarse_mesh, FLUID)


@pytest.fixture(scope="session")
def solid_space(coarse_mesh):
    return Space(coarse_mesh, SOLID)


@pytest.fixture(scope="session")
def fine_mesh():
    return build_disk_in_disk_mesh(0.5, 2.0, 0.1)


@pytest.fixture(scope="session")
def default_cfg():
    return parse_config("")


@pytest.fixture(scope="session")
def ctx(default_cfg):
    from swimctl.checks import CheckContext

    return CheckContext(default_cfg)


@pytest.fixture(scope="session")
def problem(ctx):
    return ctx.problem


@pytest.fixture(scope="session")
def converged(problem, default_cfg):
    """Nonlinear trajectory at 10% of the smallness threshold."""
    from swimctl.driver import solve_nonlinear

    q0 = default_cfg.data_fraction * problem.smallness_threshold() * problem.unstable_mode()
    traj, rep = solve_nonlinear(problem, q0)
    return q0, traj, rep


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
