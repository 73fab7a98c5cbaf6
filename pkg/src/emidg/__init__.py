"""Interior penalty DG solver for the cell-by-cell EMI model of electrophysiology."""
__version__ = "0.1.0"

from .dg_space import DgSpace, InterfaceSpace
from .forms import (BCMode, BoundaryCondition, CoefficientSet, Sources, assemble_load,
                    assemble_membrane_mass, assemble_stiffness)
from .mesh import GeometrySpec, Mesh, build
from .saddle_solver import NormChoice, SaddleSystem, build_riesz, cg, minres
from .time_integrator import TimeStepper, TransientProblem, run

__all__ = [
    "BCMode", "BoundaryCondition", "CoefficientSet", "DgSpace", "GeometrySpec", "InterfaceSpace",
    "Mesh", "NormChoice", "SaddleSystem", "Sources", "TimeStepper", "TransientProblem",
    "assemble_load", "assemble_membrane_mass", "assemble_stiffness", "build", "build_riesz",
    "cg", "minres", "run",
]
