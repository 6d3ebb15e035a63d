"""Scripting-style bindings for the spechp standard-element kernel.

The surface mirrors the host library's key/expansion pattern so a
projection script reads the same way in either API:

    import specpy as sp
    pKey = sp.PointsKey(9, sp.PointsType.GaussLobattoLegendre)
    bKey = sp.BasisKey(sp.BasisType.Modified_A, 8, pKey)
    quad = sp.StdQuadExp(bKey, bKey)
    x, y = quad.GetCoords()
    ...

Arrays pass through without copying whenever the input is already a
float64 ndarray (other dtypes fall back to one conversion copy);
coordinate getters return live views of the expansion's own storage.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

import spechp.basis as _basis
import spechp.quadrature as _quadrature
import spechp.stdregions as _std

__version__ = "0.1.0"


class PointsType(Enum):
    GaussLegendre = _quadrature.PointsType.GAUSS_LEGENDRE
    GaussLobattoLegendre = _quadrature.PointsType.GAUSS_LOBATTO_LEGENDRE
    GaussRadauMLegendre = _quadrature.PointsType.GAUSS_RADAU_M_LEGENDRE


class BasisType(Enum):
    Modified_A = _basis.BasisType.MODIFIED_A
    Modified_B = _basis.BasisType.MODIFIED_B
    GLL_Lagrange = _basis.BasisType.LAGRANGE_GLL


class PointsKey:
    """Quadrature descriptor: number of points and their distribution."""

    def __init__(self, nPts, pType: PointsType):
        self._key = _quadrature.PointsKey(int(nPts), pType.value)

    @property
    def nPts(self):
        return self._key.num_points

    def GetPointsType(self):
        return PointsType(self._key.points_type)


class BasisKey:
    """Basis descriptor: type, mode count and quadrature key."""

    def __init__(self, bType: BasisType, nModes, pKey: PointsKey):
        self._key = _basis.BasisKey(bType.value, int(nModes), pKey._key)

    @property
    def nModes(self):
        return self._key.num_modes


def _as_buffer(values, expected, what):
    arr = np.asarray(values, dtype=np.float64)   # no copy for float64 input
    if arr.shape != (expected,):
        raise ValueError(
            f"{what}: expected array of length {expected}, got shape "
            f"{arr.shape}")
    return arr


class StdQuadExp:
    """Standard quadrilateral expansion (tensor basis per direction)."""

    def __init__(self, keyA: BasisKey, keyB: BasisKey):
        self._exp = _std.StdExpansion(_std.Shape.QUAD,
                                      (keyA._key, keyB._key))

    def GetNcoeffs(self):
        return self._exp.num_modes

    def GetTotPoints(self):
        return self._exp.num_points

    def GetCoords(self):
        """Coordinate arrays of the tensor quadrature grid (live views of
        the expansion's storage; treat them as read-only)."""
        pts = self._exp.points
        return pts[:, 0], pts[:, 1]

    def FwdTrans(self, values):
        buf = _as_buffer(values, self._exp.num_points, "FwdTrans")
        return _std.fwd_trans(self._exp, buf)

    def BwdTrans(self, coeffs):
        buf = _as_buffer(coeffs, self._exp.num_modes, "BwdTrans")
        return _std.bwd_trans(self._exp, buf)

    def Integral(self, values):
        buf = _as_buffer(values, self._exp.num_points, "Integral")
        return _std.integral(self._exp, buf)


__all__ = ["PointsType", "BasisType", "PointsKey", "BasisKey", "StdQuadExp",
           "__version__"]
