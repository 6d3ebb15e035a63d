"""Compact 2D spectral element kernel.

Modal bases on segments, quadrilaterals and collapsed-coordinate
triangles; CG assembly with variable per-element order; DG traces with
Riemann fluxes; batched operator strategies with autotuning; a
hierarchical JSON mesh container with graph partitioning; and explicit
solvers for advection and acoustic perturbations with p-adaptivity.
"""

__version__ = "0.1.0"

from .basis import BasisKey, BasisType
from .quadrature import PointsKey, PointsType, make_rule
from .stdregions import Shape, StdExpansion, make_quad, make_seg, make_tri

__all__ = [
    "BasisKey", "BasisType", "PointsKey", "PointsType", "Shape",
    "StdExpansion", "make_quad", "make_seg", "make_tri", "make_rule",
    "__version__",
]
