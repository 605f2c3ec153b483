"""Adaptive finite elements for the Poisson problem with equilibrated-flux
error estimators and computable contraction factors."""

from .adapt import AdaptConfig, AdaptRecord, doerfler_mark, run_adaptive
from .equilibrate import assemble_global_flux, element_indicators, equilibrate_patches
from .galerkin import energy_error, solve_poisson
from .mesh import Mesh, bisect, build_initial_mesh, refine_uniform, vertex_patch
from .problems import make_problem

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptRecord", "Mesh", "assemble_global_flux", "bisect",
    "build_initial_mesh", "doerfler_mark", "element_indicators", "energy_error",
    "equilibrate_patches", "make_problem", "refine_uniform", "run_adaptive",
    "solve_poisson", "vertex_patch",
]
