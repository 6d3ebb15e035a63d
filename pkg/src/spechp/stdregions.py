"""Reference elements (segment, quadrilateral, triangle) and their operations.

Coefficient storage is boundary-first in each direction: per segment
direction the two linear modes come first, then bubbles by increasing
degree.  Quadrilaterals use the tensor index n = p*m2 + q.  Triangles use
blocks p = 0..P1 with q = 0..P2-p inside each block; the (0,1) coefficient
is the collapsed-vertex mode and its basis function picks up an extra
first-direction contribution so that it stays a polynomial on the triangle.

Physical values live on the tensor quadrature grid, flattened C-order with
the first direction slowest, i.e. point (i, j) -> i*Q2 + j.  Triangle
quadrature weights absorb the collapse Jacobian (1 - eta_2)/2 into the
second direction.
"""

from __future__ import annotations

import warnings
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .basis import (
    BasisError,
    BasisKey,
    BasisType,
    TriBasisTable,
    basis_table,
    boundary_first_permutation,
    duffy_collapse,
    duffy_expand,
    eval_lagrange_gll,
    eval_modified_A,
    eval_modified_B,
)
from .quadrature import PointsKey, PointsType, make_rule


class Shape(Enum):
    SEG = "seg"
    QUAD = "quad"
    TRI = "tri"


class ExpansionError(ValueError):
    pass


def _check_len(name, got, want):
    if got != want:
        raise ExpansionError(f"{name} has length {got}, expected {want}")


def _storage_table(key: BasisKey, points):
    """1D basis table in element storage order (boundary modes first)."""
    if key.basis_type is BasisType.MODIFIED_A:
        t = eval_modified_A(key.order, points)
        perm = boundary_first_permutation(key.order)
        return t.values[perm], t.derivs[perm]
    if key.basis_type is BasisType.LAGRANGE_GLL:
        t = eval_lagrange_gll(key.num_modes, points)
        # nodal storage: endpoints first, interior nodes in order
        perm = [0, key.num_modes - 1] + list(range(1, key.num_modes - 1))
        return t.values[perm], t.derivs[perm]
    raise ExpansionError(f"unsupported first-direction basis {key.basis_type}")


class StdExpansion:
    """A reference element: shape plus one basis key per direction.

    Immutable after construction; all derived tables are cached and the
    operations below are re-entrant.
    """

    def __init__(self, shape: Shape, basis_keys):
        basis_keys = tuple(basis_keys)
        expected = 1 if shape is Shape.SEG else 2
        if len(basis_keys) != expected:
            raise ExpansionError(
                f"{shape.value} needs {expected} basis keys, got {len(basis_keys)}")
        if shape is Shape.TRI:
            if basis_keys[1].basis_type is not BasisType.MODIFIED_B:
                raise ExpansionError("triangle direction 2 must use the "
                                     "collapsed-direction basis")
            if basis_keys[0].basis_type is not BasisType.MODIFIED_A:
                raise ExpansionError("triangle direction 1 must be modal")
            if basis_keys[1].num_modes < basis_keys[0].num_modes:
                raise ExpansionError("triangle needs P2 >= P1")
        else:
            for key in basis_keys:
                if key.basis_type is BasisType.MODIFIED_B:
                    raise ExpansionError("collapsed-direction basis is only "
                                         "valid on triangles")
        self.shape = shape
        self.basis_keys = basis_keys

    # -- quadrature ---------------------------------------------------------

    @cached_property
    def rules(self):
        return tuple(make_rule(k.points_key) for k in self.basis_keys)

    @property
    def num_points_dir(self):
        return tuple(len(r.points) for r in self.rules)

    @property
    def num_points(self):
        return int(np.prod(self.num_points_dir))

    @cached_property
    def weights(self):
        if self.shape is Shape.SEG:
            return self.rules[0].weights.copy()
        w1 = self.rules[0].weights
        w2 = self.rules[1].weights
        if self.shape is Shape.TRI:
            w2 = w2 * 0.5 * (1.0 - self.rules[1].points)
        return np.outer(w1, w2).ravel()

    @cached_property
    def points(self):
        """Reference coordinates of the quadrature grid, shape (npts, dim)."""
        if self.shape is Shape.SEG:
            return self.rules[0].points[:, None].copy()
        g1, g2 = np.meshgrid(self.rules[0].points, self.rules[1].points,
                             indexing="ij")
        eta = np.stack([g1.ravel(), g2.ravel()], axis=1)
        if self.shape is Shape.TRI:
            return duffy_collapse(eta)
        return eta

    # -- basis tables -------------------------------------------------------

    @cached_property
    def tables(self):
        """Per-direction (values, derivs) in storage order."""
        out = []
        for d, key in enumerate(self.basis_keys):
            pts = self.rules[d].points
            if key.basis_type is BasisType.MODIFIED_B:
                out.append(eval_modified_B(self.basis_keys[0].order,
                                           key.order, pts))
            else:
                out.append(_storage_table(key, pts))
        return tuple(out)

    @cached_property
    def num_modes(self):
        if self.shape is Shape.SEG:
            return self.basis_keys[0].num_modes
        if self.shape is Shape.QUAD:
            return self.basis_keys[0].num_modes * self.basis_keys[1].num_modes
        return len(self.tables[1].index)

    @cached_property
    def mode_index(self):
        """(p, q) storage pair per flat coefficient (2D shapes)."""
        if self.shape is Shape.SEG:
            return tuple((p,) for p in range(self.num_modes))
        if self.shape is Shape.QUAD:
            m2 = self.basis_keys[1].num_modes
            return tuple((n // m2, n % m2) for n in range(self.num_modes))
        return self.tables[1].index

    @cached_property
    def mode_degrees(self):
        """Polynomial degree of each stored mode (modal bases only)."""

        def deg1(k):
            return 1 if k <= 1 else k

        if self.shape is Shape.SEG:
            return np.array([deg1(p) for p in range(self.num_modes)])
        if self.shape is Shape.QUAD:
            return np.array([max(deg1(p), deg1(q)) for p, q in self.mode_index])
        out = []
        for p, q in self.mode_index:
            if p == 0:
                out.append(deg1(q))
            elif p == 1:
                out.append(1 if q == 0 else q + 1)
            else:
                out.append(p if q == 0 else p + q)
        return np.array(out)

    @cached_property
    def bwd_matrix(self):
        """Dense operator B with B[n, i] = phi_n(xi_i), the canonical layout
        used by the full-matrix strategy and by the oracles."""
        if self.shape is Shape.SEG:
            return self.tables[0][0].copy()
        if self.shape is Shape.QUAD:
            a1, a2 = self.tables[0][0], self.tables[1][0]
            return np.einsum("pi,qj->pqij", a1, a2).reshape(
                self.num_modes, self.num_points)
        a1 = self.tables[0][0]
        b2 = self.tables[1]
        mats = []
        for n, (p, q) in enumerate(b2.index):
            m = np.outer(a1[p], b2.values[n])
            if (p, q) == (0, 1):
                m = m + np.outer(a1[1], b2.values[n])
            mats.append(m.ravel())
        return np.array(mats)

    @cached_property
    def _collapse_factors(self):
        """Pointwise chain-rule factors for triangle derivatives."""
        eta1 = self.rules[0].points
        eta2 = self.rules[1].points
        f = 2.0 / (1.0 - eta2)[None, :]          # d(eta1)/d(xi1)
        g = (1.0 + eta1)[:, None] / (1.0 - eta2)[None, :]
        return f, g

    @cached_property
    def deriv_matrices(self):
        """Dense collocation derivative operators per reference direction,
        acting on flattened physical vectors."""
        from .quadrature import diff_matrix

        if self.shape is Shape.SEG:
            return (diff_matrix(self.rules[0]),)
        d1 = diff_matrix(self.rules[0])
        d2 = diff_matrix(self.rules[1])
        q1, q2 = self.num_points_dir
        k1 = np.kron(d1, np.eye(q2))
        k2 = np.kron(np.eye(q1), d2)
        if self.shape is Shape.QUAD:
            return (k1, k2)
        f, g = self._collapse_factors
        fr = np.broadcast_to(f, (q1, q2)).ravel()
        return (fr[:, None] * k1, g.ravel()[:, None] * k1 + k2)

    @cached_property
    def deriv_bwd_matrices(self):
        """B_a[n, i] = d(phi_n)/d(xi_a) at point i (exact for these bases)."""
        return tuple(self.bwd_matrix @ d.T for d in self.deriv_matrices)

    @cached_property
    def mass(self):
        m = self.bwd_matrix @ (self.weights[None, :] * self.bwd_matrix).T
        return 0.5 * (m + m.T)

    @cached_property
    def _proj_qr(self):
        """QR of sqrt(W) B^T: solving the projection as weighted least
        squares halves the conditioning exponent of the normal equations."""
        sqrt_w = np.sqrt(self.weights)
        q, r = np.linalg.qr((self.bwd_matrix * sqrt_w[None, :]).T)
        if np.min(np.abs(np.diag(r))) == 0:   # pragma: no cover
            raise ExpansionError("singular projection system")
        return sqrt_w, q, r

    # -- mode topology (used by assembly) ------------------------------------

    @cached_property
    def vertex_modes(self):
        """Flat coefficient ids of the vertex modes, in local vertex order."""
        if self.shape is Shape.SEG:
            return (0, 1)
        if self.shape is Shape.QUAD:
            m2 = self.basis_keys[1].num_modes
            return (0, m2, m2 + 1, 1)            # V0 V1 V2 V3
        bs = self.tables[1].block_start
        return (0, bs[1], 1)                     # V0 V1 V2(top)

    @cached_property
    def edge_modes(self):
        """Per local edge: dict with mode-axis endpoints (local vertex ids),
        bubble flat ids by increasing degree, and the trace extraction spec
        (axis direction d, fixed line index)."""
        if self.shape is Shape.SEG:
            return ()
        m1 = self.basis_keys[0].num_modes
        m2 = self.basis_keys[1].num_modes
        q1, q2 = self.num_points_dir
        if self.shape is Shape.QUAD:
            flat = lambda p, q: p * m2 + q
            return (
                dict(ends=(0, 1), bubbles=[flat(k, 0) for k in range(2, m1)],
                     axis=0, line=0),
                dict(ends=(1, 2), bubbles=[flat(1, k) for k in range(2, m2)],
                     axis=1, line=q1 - 1),
                dict(ends=(3, 2), bubbles=[flat(k, 1) for k in range(2, m1)],
                     axis=0, line=q2 - 1),
                dict(ends=(0, 3), bubbles=[flat(0, k) for k in range(2, m2)],
                     axis=1, line=0),
            )
        bs = self.tables[1].block_start
        return (
            dict(ends=(0, 1), bubbles=[bs[k] for k in range(2, m1)],
                 axis=0, line=0),
            dict(ends=(1, 2), bubbles=[bs[1] + k for k in range(1, m2 - 1)],
                 axis=1, line=q1 - 1),
            dict(ends=(0, 2), bubbles=[k for k in range(2, m2)],
                 axis=1, line=0),
        )

    @cached_property
    def interior_modes(self):
        on_boundary = set(self.vertex_modes)
        for e in self.edge_modes:
            on_boundary.update(e["bubbles"])
        return tuple(n for n in range(self.num_modes) if n not in on_boundary)

    # -- arbitrary-point evaluation ------------------------------------------

    def eval_basis_at(self, xi):
        """Basis values at arbitrary reference points, shape (nmodes, len(xi))."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if self.shape is Shape.SEG:
            vals, _ = _storage_table(self.basis_keys[0], xi[:, 0])
            return vals
        if self.shape is Shape.QUAD:
            a1, _ = _storage_table(self.basis_keys[0], xi[:, 0])
            a2, _ = _storage_table(self.basis_keys[1], xi[:, 1])
            m2 = self.basis_keys[1].num_modes
            out = np.empty((self.num_modes, len(xi)))
            for n in range(self.num_modes):
                out[n] = a1[n // m2] * a2[n % m2]
            return out
        eta = duffy_expand(xi)
        a1, _ = _storage_table(self.basis_keys[0], eta[:, 0])
        b2 = eval_modified_B(self.basis_keys[0].order,
                             self.basis_keys[1].order, eta[:, 1])
        out = np.empty((self.num_modes, len(xi)))
        for n, (p, q) in enumerate(b2.index):
            out[n] = a1[p] * b2.values[n]
            if (p, q) == (0, 1):
                out[n] += a1[1] * b2.values[n]
        return out

    def eval_basis_deriv_at(self, xi):
        """Reference-coordinate basis gradients at arbitrary points (away from
        the collapsed vertex for triangles): tuple of (nmodes, npts) arrays."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if self.shape is Shape.SEG:
            _, ders = _storage_table(self.basis_keys[0], xi[:, 0])
            return (ders,)
        if self.shape is Shape.QUAD:
            a1, d1 = _storage_table(self.basis_keys[0], xi[:, 0])
            a2, d2 = _storage_table(self.basis_keys[1], xi[:, 1])
            m2 = self.basis_keys[1].num_modes
            g1 = np.empty((self.num_modes, len(xi)))
            g2 = np.empty((self.num_modes, len(xi)))
            for n in range(self.num_modes):
                p, q = n // m2, n % m2
                g1[n] = d1[p] * a2[q]
                g2[n] = a1[p] * d2[q]
            return (g1, g2)
        eta = duffy_expand(xi)
        a1, d1 = _storage_table(self.basis_keys[0], eta[:, 0])
        b2 = eval_modified_B(self.basis_keys[0].order,
                             self.basis_keys[1].order, eta[:, 1])
        fac1 = 2.0 / (1.0 - eta[:, 1])
        fac2 = (1.0 + eta[:, 0]) / (1.0 - eta[:, 1])
        g1 = np.empty((self.num_modes, len(xi)))
        g2 = np.empty((self.num_modes, len(xi)))
        for n, (p, q) in enumerate(b2.index):
            de1 = d1[p] * b2.values[n]
            de2 = a1[p] * b2.derivs[n]
            if (p, q) == (0, 1):
                de1 += d1[1] * b2.values[n]
                de2 += a1[1] * b2.derivs[n]
            g1[n] = fac1 * de1
            g2[n] = fac2 * de1 + de2
        return (g1, g2)


# -- default construction ----------------------------------------------------


def default_points_key(num_modes, collapsed=False):
    """Default rule: one more point than modes; collapsed directions use the
    endpoint-at-minus-one distribution so the singular vertex carries no point."""
    ptype = (PointsType.GAUSS_RADAU_M_LEGENDRE if collapsed
             else PointsType.GAUSS_LOBATTO_LEGENDRE)
    return PointsKey(num_modes + 1, ptype)


def make_seg(P, num_points=None, basis=BasisType.MODIFIED_A):
    m = P + 1
    pk = PointsKey(num_points, PointsType.GAUSS_LOBATTO_LEGENDRE) \
        if num_points else default_points_key(m)
    return StdExpansion(Shape.SEG, (BasisKey(basis, m, pk),))


def make_quad(P, num_points=None, basis=BasisType.MODIFIED_A, P2=None):
    m1, m2 = P + 1, (P2 if P2 is not None else P) + 1
    if num_points:
        pk1 = PointsKey(num_points, PointsType.GAUSS_LOBATTO_LEGENDRE)
        pk2 = pk1
    else:
        pk1, pk2 = default_points_key(m1), default_points_key(m2)
    return StdExpansion(Shape.QUAD, (BasisKey(basis, m1, pk1),
                                     BasisKey(basis, m2, pk2)))


def make_tri(P, num_points=None, P2=None):
    m1, m2 = P + 1, (P2 if P2 is not None else P) + 1
    pk1 = PointsKey(num_points or m1 + 1, PointsType.GAUSS_LOBATTO_LEGENDRE)
    pk2 = PointsKey(num_points or m2 + 1, PointsType.GAUSS_RADAU_M_LEGENDRE)
    return StdExpansion(Shape.TRI, (BasisKey(BasisType.MODIFIED_A, m1, pk1),
                                    BasisKey(BasisType.MODIFIED_B, m2, pk2)))


def make_expansion(shape, P, num_points=None, basis=BasisType.MODIFIED_A):
    if shape is Shape.SEG:
        return make_seg(P, num_points, basis)
    if shape is Shape.QUAD:
        return make_quad(P, num_points, basis)
    return make_tri(P, num_points)


# -- operations ---------------------------------------------------------------


def bwd_trans(exp: StdExpansion, coeffs):
    """Evaluate a coefficient vector at the quadrature points (dense path)."""
    coeffs = np.asarray(coeffs, dtype=float)
    _check_len("coeffs", coeffs.shape[-1], exp.num_modes)
    return coeffs @ exp.bwd_matrix


def bwd_trans_sumfac(exp: StdExpansion, coeffs):
    """Same result as bwd_trans through staged tensor contractions; the
    temporary has shape (m1, Q2)."""
    coeffs = np.asarray(coeffs, dtype=float)
    _check_len("coeffs", coeffs.shape[-1], exp.num_modes)
    if exp.shape is Shape.SEG:
        return coeffs @ exp.tables[0][0]
    q1, q2 = exp.num_points_dir
    m1 = exp.basis_keys[0].num_modes
    if exp.shape is Shape.QUAD:
        m2 = exp.basis_keys[1].num_modes
        tmp = coeffs.reshape(m1, m2) @ exp.tables[1][0]   # (m1, Q2)
        return (exp.tables[0][0].T @ tmp).ravel()
    b2 = exp.tables[1]
    tmp = np.empty((m1, q2))
    for p in range(m1):
        lo = b2.block_start[p]
        hi = b2.block_start[p + 1] if p + 1 < m1 else len(b2.index)
        tmp[p] = coeffs[lo:hi] @ b2.values[lo:hi]
    tmp[1] += coeffs[1] * b2.values[1]   # collapsed-vertex mode contribution
    return (exp.tables[0][0].T @ tmp).ravel()


def iproduct_wrt_base(exp: StdExpansion, phys):
    """b_n = sum_i w_i phi_n(xi_i) u(xi_i); triangle weights include the
    collapse Jacobian."""
    phys = np.asarray(phys, dtype=float)
    _check_len("phys", phys.shape[-1], exp.num_points)
    return exp.bwd_matrix @ (exp.weights * phys)


def iproduct_wrt_base_sumfac(exp: StdExpansion, phys):
    """Staged-contraction evaluation of iproduct_wrt_base."""
    phys = np.asarray(phys, dtype=float)
    _check_len("phys", phys.shape[-1], exp.num_points)
    if exp.shape is Shape.SEG:
        return exp.tables[0][0] @ (exp.weights * phys)
    q1, q2 = exp.num_points_dir
    wu = (exp.weights * phys).reshape(q1, q2)
    m1 = exp.basis_keys[0].num_modes
    tmp = exp.tables[0][0] @ wu                     # (m1, Q2)
    if exp.shape is Shape.QUAD:
        return (tmp @ exp.tables[1][0].T).ravel()
    b2 = exp.tables[1]
    out = np.empty(exp.num_modes)
    for n, (p, q) in enumerate(b2.index):
        out[n] = tmp[p] @ b2.values[n]
        if (p, q) == (0, 1):
            out[n] += tmp[1] @ b2.values[n]
    return out


def mass_matrix(exp: StdExpansion):
    return exp.mass.copy()


def fwd_trans(exp: StdExpansion, phys):
    """Galerkin projection: the solution of M u_hat = iproduct(phys),
    computed as the weighted least-squares fit sqrt(W) B^T u_hat ~ sqrt(W) u
    (identical projection, better conditioned than the normal equations)."""
    phys = np.asarray(phys, dtype=float)
    _check_len("phys", phys.shape[-1], exp.num_points)
    for key in exp.basis_keys:
        if (key.basis_type is BasisType.MODIFIED_A
                and key.points_key.num_points < key.num_modes + 1):
            warnings.warn(
                f"quadrature count {key.points_key.num_points} below "
                f"{key.num_modes + 1}: mass integration is inexact",
                stacklevel=2)
    sqrt_w, q, r = exp._proj_qr
    return solve_triangular(r, q.T @ (sqrt_w * phys))


def phys_deriv(exp: StdExpansion, phys):
    """Collocation derivatives in reference coordinates, one array per
    direction; triangles apply the collapsed-coordinate chain rule."""
    phys = np.asarray(phys, dtype=float)
    _check_len("phys", phys.shape[-1], exp.num_points)
    if exp.shape is Shape.SEG:
        from .quadrature import diff_matrix

        return (diff_matrix(exp.rules[0]) @ phys,)
    from .quadrature import diff_matrix

    q1, q2 = exp.num_points_dir
    u = phys.reshape(q1, q2)
    d1 = diff_matrix(exp.rules[0]) @ u
    d2 = u @ diff_matrix(exp.rules[1]).T
    if exp.shape is Shape.QUAD:
        return (d1.ravel(), d2.ravel())
    f, g = exp._collapse_factors
    return ((f * d1).ravel(), (g * d1 + d2).ravel())


def integral(exp: StdExpansion, phys):
    phys = np.asarray(phys, dtype=float)
    _check_len("phys", phys.shape[-1], exp.num_points)
    return float(exp.weights @ phys)


# -- operation counting --------------------------------------------------------


def bwd_trans_op_counts(exp: StdExpansion):
    """Multiply-add counts for one backward transform: dense apply versus
    the staged contractions (the quantity behind the O(P^{2d}) vs O(P^{d+1})
    trade)."""
    dense = exp.num_modes * exp.num_points
    if exp.shape is Shape.SEG:
        return {"dense": dense, "sumfac": dense}
    q1, q2 = exp.num_points_dir
    m1 = exp.basis_keys[0].num_modes
    if exp.shape is Shape.QUAD:
        m2 = exp.basis_keys[1].num_modes
        stage1 = m1 * m2 * q2
    else:
        stage1 = (exp.num_modes + 1) * q2   # +1 for the collapsed-vertex fix
    return {"dense": dense, "sumfac": stage1 + m1 * q1 * q2}
