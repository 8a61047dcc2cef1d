"""Numerical laboratory for the thin obstacle problem with weight |x_n|^a."""

from .grid import ProblemParams, ScalarField, build_grid
from .exact import ConeElement, h_e_eval, project_to_cone, sample_cone_element
from .solver import assemble, kkt_check, solve_psor

__version__ = "0.1.0"

__all__ = [
    "ConeElement",
    "ProblemParams",
    "ScalarField",
    "assemble",
    "build_grid",
    "h_e_eval",
    "kkt_check",
    "project_to_cone",
    "sample_cone_element",
    "solve_psor",
]
