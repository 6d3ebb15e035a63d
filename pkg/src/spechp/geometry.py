"""Physical elements: reference-to-world mapping, Jacobian factors, validity.

The map is stored as a modal expansion of the coordinates on the element's
own shape.  Straight-sided elements are geometric order 1 (the vertex modes
alone give the bilinear/barycentric blend); curved edges are fitted once at
construction into the edge bubble coefficients, so curvature lives entirely
in vertex+edge modes and the interior follows the modal lifting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import PointsKey, PointsType, make_rule
from .stdregions import Shape, StdExpansion, make_expansion, make_seg


class GeometryError(ValueError):
    pass


_DOMAIN_TOL = 1e-10


def _fit_edge_curve(nodes):
    """Modal coefficients (boundary-first) of a curve sampled at GLL
    parameter positions, endpoints included."""
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    if n < 2:
        raise GeometryError("curve needs at least 2 nodes")
    seg = make_seg(n - 1)
    params = make_rule(PointsKey(n, PointsType.GAUSS_LOBATTO_LEGENDRE)).points
    bmat = seg.eval_basis_at(params[:, None])      # (modes, n)
    return np.linalg.solve(bmat.T, nodes)          # (modes, 2)


class ElementGeom:
    """Shape + vertex coordinates + optional per-edge curve nodes.

    Curve nodes are ordered along the edge's mode axis and include the
    endpoints.  Immutable after construction.
    """

    def __init__(self, shape: Shape, verts, curves=None, elem_id=None):
        verts = np.asarray(verts, dtype=float)
        n_expected = {Shape.QUAD: 4, Shape.TRI: 3}[shape]
        if verts.shape != (n_expected, 2):
            raise GeometryError(
                f"element {elem_id}: expected {n_expected} 2D vertices, "
                f"got array of shape {verts.shape}")
        self.shape = shape
        self.verts = verts
        self.elem_id = elem_id
        curves = dict(curves or {})

        p_geo = 1
        for nodes in curves.values():
            p_geo = max(p_geo, len(nodes) - 1)
        self.p_geo = p_geo

        exp = make_expansion(shape, p_geo)
        coeffs = np.zeros((exp.num_modes, 2))
        for v_local, mode in enumerate(exp.vertex_modes):
            coeffs[mode] = verts[v_local]
        for edge, nodes in curves.items():
            spec = exp.edge_modes[edge]
            c1d = _fit_edge_curve(nodes)
            ends = verts[list(spec["ends"])]
            if np.max(np.abs(c1d[:2] - ends)) > 1e-8:
                raise GeometryError(
                    f"element {elem_id}: curve on edge {edge} does not meet "
                    "the element vertices")
            for k, mode in enumerate(spec["bubbles"]):
                if k + 2 < len(c1d):
                    coeffs[mode] = c1d[k + 2]
        self._exp = exp
        self.coeffs = coeffs
        self.is_affine = not curves and (
            shape is Shape.TRI or self._quad_is_parallelogram())

    def _quad_is_parallelogram(self):
        v = self.verts
        return np.max(np.abs((v[2] - v[3]) - (v[1] - v[0]))) < 1e-14

    def _check_domain(self, xi):
        bad = np.max(np.abs(xi), axis=1) > 1.0 + _DOMAIN_TOL
        if self.shape is Shape.TRI:
            bad |= xi[:, 0] + xi[:, 1] > _DOMAIN_TOL
        if np.any(bad):
            raise GeometryError(
                f"element {self.elem_id}: reference point outside domain: "
                f"{xi[bad][0]}")


def x_map(geom: ElementGeom, xi):
    """World coordinates of reference point(s) xi."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    geom._check_domain(xi)
    vals = geom._exp.eval_basis_at(xi)
    out = vals.T @ geom.coeffs
    return out[0] if out.shape[0] == 1 else out


def _jacobian_at(geom: ElementGeom, xi):
    g1, g2 = geom._exp.eval_basis_deriv_at(np.atleast_2d(xi))
    dx1 = g1.T @ geom.coeffs     # (npts, 2): d(x,y)/d(xi1)
    dx2 = g2.T @ geom.coeffs
    jac = np.stack([dx1, dx2], axis=2)   # jac[i, k, a] = dx_k/dxi_a
    return jac


@dataclass(frozen=True)
class GeomFactors:
    """Per-quadrature-point mapping factors for one element."""

    jac: np.ndarray       # (npts, 2, 2): dx_k/dxi_a
    det: np.ndarray       # (npts,)
    inv: np.ndarray       # (npts, 2, 2): dxi_a/dx_k
    weights_world: np.ndarray   # quadrature weights times det


def geom_factors(geom: ElementGeom, exp: StdExpansion) -> GeomFactors:
    """Jacobian data of the element map at an expansion's quadrature grid.

    Validity is checked at the quadrature points only: a non-positive
    determinant anywhere raises, naming the element.
    """
    jac = _jacobian_at(geom, exp.points)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det <= 0):
        raise GeometryError(
            f"element {geom.elem_id}: non-positive Jacobian at "
            f"{int(np.sum(det <= 0))} quadrature point(s); invalid element")
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1] / det
    inv[:, 0, 1] = -jac[:, 0, 1] / det
    inv[:, 1, 0] = -jac[:, 1, 0] / det
    inv[:, 1, 1] = jac[:, 0, 0] / det
    return GeomFactors(jac, det, inv, exp.weights * det)


def phys_deriv_world(exp: StdExpansion, gf: GeomFactors, phys):
    """World-coordinate gradient at the quadrature points."""
    from .stdregions import phys_deriv

    d1, d2 = phys_deriv(exp, phys)
    dudx = gf.inv[:, 0, 0] * d1 + gf.inv[:, 1, 0] * d2
    dudy = gf.inv[:, 0, 1] * d1 + gf.inv[:, 1, 1] * d2
    return dudx, dudy


def integral_world(exp: StdExpansion, gf: GeomFactors, phys):
    return float(gf.weights_world @ np.asarray(phys, dtype=float))


def iproduct_world(exp: StdExpansion, gf: GeomFactors, phys):
    return exp.bwd_matrix @ (gf.weights_world * np.asarray(phys, dtype=float))


def iproduct_wrt_deriv_base_world(exp, gf, flux_x, flux_y):
    """b_n = int (d(phi_n)/dx F_x + d(phi_n)/dy F_y) over the element."""
    bd1, bd2 = exp.deriv_bwd_matrices
    gx = gf.weights_world * (gf.inv[:, 0, 0] * flux_x + gf.inv[:, 0, 1] * flux_y)
    gy = gf.weights_world * (gf.inv[:, 1, 0] * flux_x + gf.inv[:, 1, 1] * flux_y)
    return bd1 @ gx + bd2 @ gy


def world_mass_matrix(exp: StdExpansion, gf: GeomFactors):
    b = exp.bwd_matrix
    m = b @ (gf.weights_world[None, :] * b).T
    return 0.5 * (m + m.T)


def world_stiffness_matrix(exp: StdExpansion, gf: GeomFactors):
    """K_nm = int grad(phi_n) . grad(phi_m) over the element."""
    bd1, bd2 = exp.deriv_bwd_matrices
    bx = gf.inv[None, :, 0, 0] * bd1 + gf.inv[None, :, 1, 0] * bd2
    by = gf.inv[None, :, 0, 1] * bd1 + gf.inv[None, :, 1, 1] * bd2
    w = gf.weights_world
    k = bx @ (w[None, :] * bx).T + by @ (w[None, :] * by).T
    return 0.5 * (k + k.T)


def element_size(geom: ElementGeom):
    """Diameter of the smallest circle enclosing the element's vertices."""
    pts = geom.verts
    best = None
    n = len(pts)
    # circle through each pair (diameter) or triple, keep the smallest cover
    for i in range(n):
        for j in range(i + 1, n):
            c = 0.5 * (pts[i] + pts[j])
            r = 0.5 * np.linalg.norm(pts[i] - pts[j])
            if np.all(np.linalg.norm(pts - c, axis=1) <= r + 1e-12):
                if best is None or r < best:
                    best = r
    if best is None:
        for i in range(n):
            for j in range(i + 1, n):
                for k in range(j + 1, n):
                    c, r = _circumcircle(pts[i], pts[j], pts[k])
                    if c is None:
                        continue
                    if np.all(np.linalg.norm(pts - c, axis=1) <= r + 1e-12):
                        if best is None or r < best:
                            best = r
    return 2.0 * best


def _circumcircle(a, b, c):
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if abs(d) < 1e-30:
        return None, None
    ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
    uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    return center, np.linalg.norm(a - center)


class SegGeom:
    """A mesh segment as a 1D manifold in the plane, for trace integrals."""

    def __init__(self, endpoints, curve_nodes=None, seg_id=None):
        endpoints = np.asarray(endpoints, dtype=float)
        if endpoints.shape != (2, 2):
            raise GeometryError(f"segment {seg_id}: need two 2D endpoints")
        self.seg_id = seg_id
        nodes = endpoints if curve_nodes is None else np.asarray(curve_nodes, float)
        self._coeffs = _fit_edge_curve(nodes)
        self._exp = make_seg(len(nodes) - 1)

    def eval(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self._exp.eval_basis_at(s[:, None]).T @ self._coeffs

    def tangent(self, s):
        """dx/ds at parameter values s (not normalised)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        (ders,) = self._exp.eval_basis_deriv_at(s[:, None])
        return ders.T @ self._coeffs

    def arc_jacobian(self, s):
        return np.linalg.norm(self.tangent(s), axis=1)
