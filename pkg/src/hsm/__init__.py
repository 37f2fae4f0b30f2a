"""Complex-scaled half-space matching for 2D Helmholtz scattering."""

from .complex_special import hankel1, hankel1_scaled
from .fem_coupling import Mesh2D, MaterialField, solve_general, structured_mesh
from .hsm_assembly import QuadratureSpec, solve_dirichlet
from .postprocess import far_field_axis, reconstruct_field, reconstruct_point
from .scaling_geometry import WaveParams
from .trace_space import BoundaryData, TraceGridSpec, TraceVector, build_space

__all__ = [
    "BoundaryData",
    "MaterialField",
    "Mesh2D",
    "QuadratureSpec",
    "TraceGridSpec",
    "TraceVector",
    "WaveParams",
    "build_space",
    "far_field_axis",
    "hankel1",
    "hankel1_scaled",
    "reconstruct_field",
    "reconstruct_point",
    "solve_dirichlet",
    "solve_general",
    "structured_mesh",
]

__version__ = "0.1.0"
