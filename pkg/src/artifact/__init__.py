"""Homogenization of unsteady Stokes flow in perforated domains: a numerical laboratory.

Cell correctors and the memory permeability kernel, the homogenized Darcy
law with memory, the eps-scale Stokes solve, and the two-scale expansion
with its error norms and boundary-layer correctors.
"""
from .aux_correctors import BogovskiiCorrector, FluxCorrector, bogovskii_cell, flux_corrector
from .cell_corrector import (CorrectorTrajectory, PermeabilityKernel, TimeGrid, decay_diagnostics,
                             permeability, solve_corrector, solve_correctors,
                             verify_semigroup_relation)
from .config import RunConfig
from .darcy_memory import (BodyForce, HomogenizedSolution, check_homogenized, ramp_force,
                           solve_pressure, velocity_from_pressure, volterra_convolve)
from .expansion_error import (ErrorReport, Expansion, assemble_J, bogovskii_estimate_probe,
                              boundary_layer_solve, check_divergence_identity,
                              conditional_average, error_norms, rate_fit, smooth)
from .fine_scale import FineScaleSolution, extend_pressure, solve_fine
from .geometry import (CellGeometry, ConfigurationError, CutoffFunction, LayerDecomposition,
                       PerforatedDomain, build_perforated, decompose_layer, radial_cutoff)

__version__ = "0.1.0"

__all__ = [
    "BodyForce", "BogovskiiCorrector", "CellGeometry", "ConfigurationError", "CorrectorTrajectory",
    "CutoffFunction", "ErrorReport", "Expansion", "FineScaleSolution", "FluxCorrector",
    "HomogenizedSolution", "LayerDecomposition", "PerforatedDomain", "PermeabilityKernel",
    "RunConfig", "TimeGrid", "assemble_J", "bogovskii_cell", "bogovskii_estimate_probe",
    "boundary_layer_solve", "build_perforated", "check_divergence_identity", "check_homogenized",
    "conditional_average", "decay_diagnostics", "decompose_layer", "error_norms",
    "extend_pressure", "flux_corrector", "permeability", "radial_cutoff", "ramp_force",
    "rate_fit", "smooth", "solve_corrector", "solve_correctors", "solve_fine", "solve_pressure",
    "velocity_from_pressure", "verify_semigroup_relation", "volterra_convolve",
]
