"""Adaptive isogeometric analysis with hierarchical B-splines on 2D NURBS patches."""
from .adapt import (AdaptConfig, AdaptRecord, AdaptResult, EstimatorResult, MarkParams,
                    NumericalFailure, adaptive_loop, dorfler_mark, estimate, oscillations,
                    rate_fit)
from .basis import HB, THB, HierBasis
from .dyadic import DyadicRational
from .fem import (EllipticProblem, LinearSystem, Solution, SolverError, assemble, h1_error, solve,
                  solve_problem)
from .geometry import GeometryError, NurbsGeometry, identity_square, quarter_annulus, rectangle
from .hierarchy import H_ADMISSIBLE, T_ADMISSIBLE, HierMesh, LevelSequence, MeshError
from .spline import KnotVector, SplineError, TensorSpace

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptRecord", "AdaptResult", "EstimatorResult", "MarkParams",
    "NumericalFailure", "adaptive_loop", "dorfler_mark", "estimate", "oscillations", "rate_fit",
    "HB", "THB", "HierBasis", "DyadicRational", "EllipticProblem", "LinearSystem", "Solution",
    "SolverError", "assemble", "h1_error", "solve", "solve_problem", "GeometryError",
    "NurbsGeometry", "identity_square", "quarter_annulus", "rectangle", "H_ADMISSIBLE",
    "T_ADMISSIBLE", "HierMesh", "LevelSequence", "MeshError", "KnotVector", "SplineError",
    "TensorSpace",
]
