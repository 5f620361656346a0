"""Adaptive P1 finite elements for L1-L2-TV image models.

The package discretizes the primal-dual optimality system of the
L1-L2-TV functional on adaptively bisected triangulations and applies it
to image inpainting and coarse-to-fine optical flow with adaptive warping.
"""

from .adapt import (IndicatorField, afem_loop, dorfler_mark,
                    primal_dual_indicator, residual_indicator)
from .fe_space import (DgScalar, FeCellMatrix, FeScalar, FeVector, evaluate,
                       gradient, interpolate_image, prolongate,
                       resample_to_image)
from .mesh import (Mesh, bisect, build_grid_mesh, build_image_mesh,
                   enumerate_facets, save_off, save_vtk, uniform_refine)
from .model import (DualPair, GridOperatorB, IdentityOp, MaskedIdentity,
                    ModelParams, PointwiseVector, assemble_B, duality_gap,
                    energy_dual, energy_primal, huber, huber_prime,
                    optimality_residual)
from .solver import SolveReport, solve

__version__ = "0.1.0"

__all__ = [
    "Mesh", "build_image_mesh", "build_grid_mesh", "bisect",
    "uniform_refine", "enumerate_facets", "save_off", "save_vtk",
    "FeScalar", "FeVector", "FeCellMatrix", "DgScalar", "evaluate",
    "gradient", "prolongate", "interpolate_image", "resample_to_image",
    "ModelParams", "IdentityOp", "MaskedIdentity", "PointwiseVector",
    "DualPair", "GridOperatorB", "assemble_B", "huber", "huber_prime",
    "energy_primal", "energy_dual", "duality_gap", "optimality_residual",
    "solve", "SolveReport", "IndicatorField", "residual_indicator",
    "primal_dual_indicator", "dorfler_mark", "afem_loop",
]
