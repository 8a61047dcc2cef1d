import functools
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from obstacle_lab.exact import ConeElement, half_integer_modes, sample_cone_element  # noqa: E402
from obstacle_lab.grid import ProblemParams, build_grid  # noqa: E402
from obstacle_lab.solver import assemble, optimal_omega, solve_psor  # noqa: E402

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@functools.lru_cache(maxsize=None)
def he_field(s: float, h: float, R: float = 1.5, n: int = 2):
    """Nodal samples of h_{e_1} on B_R."""
    grid = build_grid(ProblemParams(n, s, h, R))
    e = tuple([1.0] + [0.0] * (n - 2))
    return sample_cone_element(ConeElement(1.0, e), grid)


@functools.lru_cache(maxsize=None)
def modes_solution(coeffs: tuple, h: float = 1 / 64, tol: float = 1e-10):
    """Solved minimizer for the closed-form datum h_e + Σ c_m ρ^{3/2+2m} cos((3/2+2m)θ) (n=2, s=1/2)."""
    grid = build_grid(ProblemParams(2, 0.5, h, 1.0))
    g = half_integer_modes(coeffs)
    p = assemble(grid, g)
    scale = max(1.0, float(np.nanmax(np.abs(p.boundary_values))))
    return solve_psor(p, omega=optimal_omega(grid), tol=tol * scale), g, tol * scale


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
