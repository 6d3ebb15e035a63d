"""Hierarchical modal bases on [-1,1] and the collapsed-coordinate triangle map.

The segment basis has two linear boundary modes, (1-xi)/2 and (1+xi)/2, and
bubble interior modes ((1-xi)/2)((1+xi)/2) P^{1,1}_{p-1}(xi).  Triangles use a
second-direction basis whose blocks carry powers of (1-z)/2 so that every mode
is polynomial in the triangle's own coordinates; its first block re-uses the
segment modes with the two boundary modes listed first, which is what makes
C0 assembly and quad/triangle compatibility work.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .quadrature import PointsKey, jacobi, jacobi_deriv, make_rule


class BasisType(Enum):
    MODIFIED_A = "modified_a"
    MODIFIED_B = "modified_b"
    LAGRANGE_GLL = "lagrange_gll"


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class BasisKey:
    basis_type: BasisType
    num_modes: int
    points_key: PointsKey

    def __post_init__(self):
        if not isinstance(self.num_modes, int) or self.num_modes < 1:
            raise BasisError(f"num_modes must be positive, got {self.num_modes!r}")
        if self.basis_type is BasisType.MODIFIED_A and self.num_modes < 2:
            raise BasisError("modified basis needs num_modes >= 2 "
                             "(both boundary modes are always present)")
        if self.points_key.num_points < self.num_modes:
            warnings.warn(
                f"quadrature count {self.points_key.num_points} below mode "
                f"count {self.num_modes}; transforms will be rank-deficient",
                stacklevel=2)

    @property
    def order(self):
        return self.num_modes - 1


@dataclass(frozen=True)
class BasisTable:
    """values[p, i] = phi_p(xi_i); derivs[p, i] = phi_p'(xi_i)."""

    values: np.ndarray
    derivs: np.ndarray


@dataclass(frozen=True)
class TriBasisTable:
    """Second-direction triangle table: rows indexed by (p, q) pairs.

    Block p holds num_modes - p rows; `index` lists the (p, q) of each row
    and `block_start[p]` the row where block p begins.
    """

    values: np.ndarray
    derivs: np.ndarray
    index: tuple
    block_start: tuple


def eval_modified_A(P, points) -> BasisTable:
    """Segment modal basis of order P (P+1 modes) in formula order:
    row 0 = (1-xi)/2, rows 1..P-1 = bubbles, row P = (1+xi)/2."""
    if P < 1:
        raise BasisError("order must be >= 1; boundary modes are undefined at P=0")
    z = np.asarray(points, dtype=float)
    n = len(z)
    lo = 0.5 * (1.0 - z)
    hi = 0.5 * (1.0 + z)
    vals = np.empty((P + 1, n))
    ders = np.empty((P + 1, n))
    vals[0], ders[0] = lo, np.full(n, -0.5)
    vals[P], ders[P] = hi, np.full(n, 0.5)
    for p in range(1, P):
        jac = jacobi(p - 1, 1.0, 1.0, z)
        djac = jacobi_deriv(p - 1, 1.0, 1.0, z)
        vals[p] = lo * hi * jac
        ders[p] = -0.5 * z * jac + lo * hi * djac
    return BasisTable(vals, ders)


def eval_lagrange_gll(num_modes, points) -> BasisTable:
    """Nodal basis: Lagrange polynomials through num_modes GLL nodes."""
    from .quadrature import PointsType, diff_matrix, interp_matrix

    nodes = make_rule(PointsKey(num_modes, PointsType.GAUSS_LOBATTO_LEGENDRE))
    z = np.asarray(points, dtype=float)
    vals = interp_matrix(nodes, z).T
    # derivative of the interpolant: differentiate on the nodes, then interp
    ders = (interp_matrix(nodes, z) @ diff_matrix(nodes)).T
    return BasisTable(np.ascontiguousarray(vals), np.ascontiguousarray(ders))


def boundary_first_permutation(P):
    """Row permutation mapping formula order to boundary-first storage:
    [left vertex, right vertex, bubbles by increasing degree]."""
    return [0, P] + list(range(1, P))


def eval_modified_B(P_a, P_b, points) -> TriBasisTable:
    """Second-direction triangle basis with blocks indexed (p, q).

    Block p=0 repeats the segment basis boundary-first (q=0 and q=1 are the
    two linear modes); blocks p>=1 are ((1-z)/2)^p for q=0 and
    ((1-z)/2)^p ((1+z)/2) P^{2p-1,1}_{q-1}(z) for q>=1.
    """
    if P_a < 1 or P_b < 1:
        raise BasisError("orders must be >= 1")
    if P_b < P_a:
        raise BasisError("second-direction order must be >= first (P_b >= P_a)")
    z = np.asarray(points, dtype=float)
    n = len(z)
    lo = 0.5 * (1.0 - z)
    hi = 0.5 * (1.0 + z)

    seg = eval_modified_A(P_b, z)
    perm = boundary_first_permutation(P_b)

    rows_v, rows_d, index, block_start = [], [], [], []
    for p in range(P_a + 1):
        block_start.append(len(index))
        if p == 0:
            for q in range(P_b + 1):
                rows_v.append(seg.values[perm[q]])
                rows_d.append(seg.derivs[perm[q]])
                index.append((0, q))
        else:
            lop = lo**p
            dlop = -0.5 * p * lo ** (p - 1)
            rows_v.append(lop)
            rows_d.append(dlop)
            index.append((p, 0))
            for q in range(1, P_b + 1 - p):
                jac = jacobi(q - 1, 2 * p - 1, 1.0, z)
                djac = jacobi_deriv(q - 1, 2 * p - 1, 1.0, z)
                rows_v.append(lop * hi * jac)
                rows_d.append((dlop * hi + 0.5 * lop) * jac + lop * hi * djac)
                index.append((p, q))
    return TriBasisTable(np.array(rows_v), np.array(rows_d),
                         tuple(index), tuple(block_start))


_table_cache: dict = {}
_table_lock = threading.Lock()


def basis_table(key: BasisKey) -> BasisTable | TriBasisTable:
    """Basis values/derivatives at the key's own quadrature points (cached;
    repeated calls with an equal key return the identical table)."""
    with _table_lock:
        table = _table_cache.get(key)
    if table is not None:
        return table
    rule = make_rule(key.points_key)
    if key.basis_type is BasisType.MODIFIED_A:
        table = eval_modified_A(key.order, rule.points)
    elif key.basis_type is BasisType.LAGRANGE_GLL:
        table = eval_lagrange_gll(key.num_modes, rule.points)
    elif key.basis_type is BasisType.MODIFIED_B:
        table = eval_modified_B(key.order, key.order, rule.points)
    else:  # pragma: no cover
        raise BasisError(f"unknown basis type {key.basis_type}")
    table.values.setflags(write=False)
    table.derivs.setflags(write=False)
    with _table_lock:
        table = _table_cache.setdefault(key, table)
    return table


def duffy_collapse(eta):
    """Map a point of the square [-1,1]^2 onto the reference triangle:
    xi_1 = (1+eta_1)(1-eta_2)/2 - 1, xi_2 = eta_2."""
    eta = np.asarray(eta, dtype=float)
    eta1, eta2 = eta[..., 0], eta[..., 1]
    xi = np.empty_like(eta)
    xi[..., 0] = 0.5 * (1.0 + eta1) * (1.0 - eta2) - 1.0
    xi[..., 1] = eta2
    return xi


def duffy_expand(xi):
    """Inverse of duffy_collapse.  At the collapsed vertex xi = (-1, 1) the
    first coordinate is fixed to -1 by convention."""
    xi = np.asarray(xi, dtype=float)
    xi1, xi2 = xi[..., 0], xi[..., 1]
    eta = np.empty_like(xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta1 = 2.0 * (1.0 + xi1) / (1.0 - xi2) - 1.0
    eta[..., 0] = np.where(xi2 == 1.0, -1.0, eta1)
    eta[..., 1] = xi2
    return eta
