"""Continuous-Galerkin assembly with per-element order, plus DG traces.

Global degrees of freedom are numbered Dirichlet block first, then free
vertices, then edge modes (by segment id and degree), then element
interiors; the numbering is deterministic given the mesh.  A shared edge
carries the minimum of the adjacent element orders; the richer side's
excess edge modes are pinned to zero (global id -1, sign 0).  Edge dof
coefficients live in the segment-direction parametrisation, so a local
edge whose mode axis opposes the segment flips sign on odd-degree bubbles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import (
    SegGeom,
    iproduct_world,
    world_mass_matrix,
    world_stiffness_matrix,
)
from .quadrature import PointsKey, PointsType, interp_matrix, make_rule
from .stdregions import make_seg


class AssemblyError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = residuals


# ---------------------------------------------------------------------------
# assembly map
# ---------------------------------------------------------------------------


@dataclass
class AssemblyMap:
    local_to_global: list       # per element: int array, -1 where pinned
    signs: list                 # per element: float array (+1/-1, 0 = pinned)
    num_global: int
    num_dirichlet: int
    edge_orders: dict           # segment id -> shared edge order
    vertex_gid: dict
    edge_gid: dict              # (segment id, degree) -> gid

    @property
    def num_free(self):
        return self.num_global - self.num_dirichlet


def _dirichlet_segments(mesh, dirichlet_names):
    segs = set()
    for name in dirichlet_names:
        if name not in mesh.boundary:
            raise AssemblyError(f"unknown boundary region {name!r}")
        for cid in mesh.boundary[name]:
            kind, ids = mesh.composites[cid]
            if kind != "seg":
                raise AssemblyError(f"boundary composite {cid} is not segments")
            segs.update(ids)
    return segs


def build_assembly_map(mesh, elements, dirichlet_names=()) -> AssemblyMap:
    """Local-coefficient to global-dof map over a conformal mesh."""
    edge_orders = {}
    seg_count = {}
    for el in elements:
        for sid in el.edge_segs:
            seg_count[sid] = seg_count.get(sid, 0) + 1
            edge_orders[sid] = min(edge_orders.get(sid, el.order), el.order)
    if any(c > 2 for c in seg_count.values()):
        raise AssemblyError("mesh is non-conformal: a segment is shared by "
                            "more than two elements")

    d_segs = _dirichlet_segments(mesh, dirichlet_names)
    d_verts = set()
    for sid in d_segs:
        d_verts.update(mesh.segs[sid])

    used_verts = sorted({v for el in elements for v in el.vert_ids})
    used_seg_dofs = sorted((sid, d) for sid, p in edge_orders.items()
                           for d in range(2, p + 1))

    vertex_gid, edge_gid = {}, {}
    gid = 0
    for v in used_verts:                       # Dirichlet block first
        if v in d_verts:
            vertex_gid[v] = gid
            gid += 1
    for sid, d in used_seg_dofs:
        if sid in d_segs:
            edge_gid[(sid, d)] = gid
            gid += 1
    num_dirichlet = gid
    for v in used_verts:
        if v not in d_verts:
            vertex_gid[v] = gid
            gid += 1
    for sid, d in used_seg_dofs:
        if sid not in d_segs:
            edge_gid[(sid, d)] = gid
            gid += 1

    local_to_global, signs = [], []
    for el in elements:
        l2g = np.full(el.num_modes, -1, dtype=int)
        sgn = np.zeros(el.num_modes)
        for v_local, mode in enumerate(el.exp.vertex_modes):
            l2g[mode] = vertex_gid[el.vert_ids[v_local]]
            sgn[mode] = 1.0
        for le, spec in enumerate(el.exp.edge_modes):
            sid = el.edge_segs[le]
            fwd = el.edge_forward[le]
            p_edge = edge_orders[sid]
            for pos, mode in enumerate(spec["bubbles"]):
                degree = pos + 2
                if degree > p_edge:
                    continue                    # pinned to zero
                l2g[mode] = edge_gid[(sid, degree)]
                sgn[mode] = 1.0 if fwd or degree % 2 == 0 else -1.0
        for mode in el.exp.interior_modes:
            l2g[mode] = gid
            sgn[mode] = 1.0
            gid += 1
        local_to_global.append(l2g)
        signs.append(sgn)

    return AssemblyMap(local_to_global, signs, gid, num_dirichlet,
                       edge_orders, vertex_gid, edge_gid)


def assemble(amap: AssemblyMap, local_vectors):
    """Signed gather: sum element coefficients into the global vector."""
    out = np.zeros(amap.num_global)
    for l2g, sgn, vec in zip(amap.local_to_global, amap.signs, local_vectors):
        ok = l2g >= 0
        np.add.at(out, l2g[ok], sgn[ok] * np.asarray(vec)[ok])
    return out


def scatter(amap: AssemblyMap, global_vec):
    """Signed scatter: global vector to per-element coefficients (pinned
    modes become zero)."""
    global_vec = np.asarray(global_vec)
    out = []
    for l2g, sgn in zip(amap.local_to_global, amap.signs):
        vec = np.zeros(len(l2g))
        ok = l2g >= 0
        vec[ok] = sgn[ok] * global_vec[l2g[ok]]
        out.append(vec)
    return out


# ---------------------------------------------------------------------------
# global systems and solves
# ---------------------------------------------------------------------------


@dataclass
class GlobalSystem:
    kind: str                  # "mass" | "helmholtz"
    lam: float
    amap: AssemblyMap
    element_mats: list
    matrix: object             # CSR matrix or None when matrix-free
    diag: np.ndarray

    def apply(self, x):
        if self.matrix is not None:
            return self.matrix @ x
        locals_ = scatter(self.amap, x)
        return assemble(self.amap,
                        [m @ v for m, v in zip(self.element_mats, locals_)])


def build_global_system(elements, amap, kind="helmholtz", lam=0.0,
                        matrix_free_threshold=20000) -> GlobalSystem:
    mats = []
    for el in elements:
        m = world_mass_matrix(el.exp, el.gf)
        if kind == "helmholtz":
            m = world_stiffness_matrix(el.exp, el.gf) + lam * m
        mats.append(m)
    matrix = None
    if amap.num_global <= matrix_free_threshold:
        rows, cols, vals = [], [], []
        for l2g, sgn, m in zip(amap.local_to_global, amap.signs, mats):
            ok = np.nonzero(l2g >= 0)[0]
            g = l2g[ok]
            s = sgn[ok]
            block = (s[:, None] * m[np.ix_(ok, ok)]) * s[None, :]
            rows.append(np.repeat(g, len(g)))
            cols.append(np.tile(g, len(g)))
            vals.append(block.ravel())
        matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(amap.num_global, amap.num_global))
    if matrix is not None:
        diag = matrix.diagonal()
    else:
        # signs square away on the diagonal
        diag = np.zeros(amap.num_global)
        for l2g, m in zip(amap.local_to_global, mats):
            ok = l2g >= 0
            np.add.at(diag, l2g[ok], np.diag(m)[ok])
    return GlobalSystem(kind, lam, amap, mats, matrix, diag)


def solve_pcg(system, rhs, tol=1e-12, max_iter=2000, diag=None):
    """Conjugate gradients with a diagonal preconditioner.

    `system` is a GlobalSystem, a matrix, or a callable apply.  Raises
    ConvergenceError carrying the residual history when max_iter is hit.
    """
    if isinstance(system, GlobalSystem):
        apply_op = system.apply
        diag = system.diag if diag is None else diag
    elif callable(system):
        apply_op = system
    else:
        mat = system
        apply_op = lambda x: mat @ x
        if diag is None:
            diag = mat.diagonal() if hasattr(mat, "diagonal") else np.diag(mat)
    rhs = np.asarray(rhs, dtype=float)
    n = len(rhs)
    if diag is None:
        diag = np.ones(n)
    inv_diag = 1.0 / np.where(diag == 0, 1.0, diag)

    x = np.zeros(n)
    r = rhs.copy()
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    residuals = [np.linalg.norm(r) / rhs_norm]
    if residuals[-1] <= tol:
        return x
    for _ in range(max_iter):
        ap = apply_op(p)
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / rhs_norm
        residuals.append(res)
        if res <= tol:
            return x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"PCG did not reach {tol} in {max_iter} iterations "
        f"(final residual {residuals[-1]:.3e})", residuals)


# ---------------------------------------------------------------------------
# Dirichlet lifting
# ---------------------------------------------------------------------------


def dirichlet_values(mesh, amap: AssemblyMap, dirichlet_specs):
    """Global vector holding lifted boundary data in the Dirichlet block.

    `dirichlet_specs` maps boundary region name -> g(x, y).  Vertex dofs take
    point values; edge bubbles come from the arc-weighted 1D projection of g
    along each segment with the vertex part removed.
    """
    out = np.zeros(amap.num_global)
    for name, g in dirichlet_specs.items():
        for cid in mesh.boundary[name]:
            _, segs = mesh.composites[cid]
            for sid in segs:
                v0, v1 = mesh.segs[sid]
                for v in (v0, v1):
                    x, y = mesh.verts[v][:2]
                    out[amap.vertex_gid[v]] = g(x, y)
                p_edge = amap.edge_orders.get(sid)
                if not p_edge or p_edge < 2:
                    continue
                seg_exp = make_seg(p_edge)
                curve = mesh.curves.get(sid)
                geom = SegGeom(np.array([mesh.verts[v0][:2], mesh.verts[v1][:2]]),
                               curve_nodes=None if curve is None
                               else np.array([p[:2] for p in curve]),
                               seg_id=sid)
                s = seg_exp.rules[0].points
                xy = geom.eval(s)
                arc = geom.arc_jacobian(s)
                w = seg_exp.weights * arc
                bmat = seg_exp.bwd_matrix
                gvals = np.array([g(px, py) for px, py in xy])
                target = gvals - out[amap.vertex_gid[v0]] * bmat[0] \
                    - out[amap.vertex_gid[v1]] * bmat[1]
                bub = bmat[2:2 + (p_edge - 1)]
                mass = bub @ (w[None, :] * bub).T
                rhs = bub @ (w * target)
                coeffs = np.linalg.solve(mass, rhs)
                for pos, c in enumerate(coeffs):
                    out[amap.edge_gid[(sid, pos + 2)]] = c
    return out


def helmholtz_solve(mesh, elements, lam, forcing_phys, dirichlet_specs,
                    tol=1e-12, max_iter=3000):
    """Solve -laplace(u) + lam*u = f with Dirichlet data lifted.

    `forcing_phys` holds per-element physical samples of f;
    `dirichlet_specs` maps boundary names to g(x, y) callables.
    Returns (local coefficient vectors, info dict).
    """
    if lam < 0:
        raise AssemblyError("lam must be nonnegative")
    if lam == 0 and not dirichlet_specs:
        raise AssemblyError("pure-Neumann operator with lam=0 is singular")
    amap = build_assembly_map(mesh, elements, tuple(dirichlet_specs))
    system = build_global_system(elements, amap, "helmholtz", lam)
    rhs_local = [iproduct_world(el.exp, el.gf, f)
                 for el, f in zip(elements, forcing_phys)]
    b = assemble(amap, rhs_local)

    u_d = dirichlet_values(mesh, amap, dirichlet_specs)
    nd = amap.num_dirichlet
    if system.matrix is not None:
        b_free = b[nd:] - system.matrix[nd:, :nd] @ u_d[:nd]
        a_ff = system.matrix[nd:, nd:]
        x = solve_pcg(a_ff, b_free, tol=tol, max_iter=max_iter)
    else:
        buf = np.zeros(amap.num_global)

        def apply_free(v):
            buf[nd:] = v
            return system.apply(buf)[nd:]

        b_free = b[nd:] - system.apply(u_d)[nd:]
        x = solve_pcg(apply_free, b_free, tol=tol, max_iter=max_iter,
                      diag=system.diag[nd:])
    solution = u_d.copy()
    solution[nd:] = x
    locals_ = scatter(amap, solution)
    info = {"amap": amap, "global": solution, "num_dirichlet": nd}
    return locals_, info


# ---------------------------------------------------------------------------
# DG traces
# ---------------------------------------------------------------------------


@dataclass
class TraceSeg:
    seg_id: int
    left: tuple                     # (element index, local edge)
    right: tuple | None
    bc_name: str | None
    num_points: int
    s_points: np.ndarray
    points_world: np.ndarray        # (Q_t, 2)
    normals: np.ndarray             # outward from the left element
    weights_arc: np.ndarray         # 1D weights times arc Jacobian


@dataclass
class TraceMap:
    traces: list
    interior: list = field(default_factory=list)   # indices into traces
    boundary: list = field(default_factory=list)
    # stacked per-side operators, aligned with `traces`
    extract_minus: list = field(default_factory=list)  # (Q_t, npts) matrices
    extract_plus: list = field(default_factory=list)   # None on boundary
    lift_minus: list = field(default_factory=list)     # (nmodes, Q_t)
    lift_plus: list = field(default_factory=list)


def _edge_line_slicer(exp, spec):
    q1, q2 = exp.num_points_dir
    if spec["axis"] == 0:
        idx = np.arange(q1) * q2 + spec["line"]
    else:
        idx = spec["line"] * q2 + np.arange(q2)
    return idx


def _edge_ref_points(exp, local_edge, tau):
    """Reference coordinates xi along a local edge at parameter tau."""
    spec = exp.edge_modes[local_edge]
    tau = np.asarray(tau, dtype=float)
    from .stdregions import Shape

    if exp.shape is Shape.QUAD:
        fixed = {0: -1.0, 1: 1.0, 2: 1.0, 3: -1.0}[local_edge]
        if spec["axis"] == 0:
            return np.stack([tau, np.full_like(tau, fixed)], axis=1)
        return np.stack([np.full_like(tau, fixed), tau], axis=1)
    if local_edge == 0:
        return np.stack([tau, np.full_like(tau, -1.0)], axis=1)
    if local_edge == 1:
        return np.stack([-tau, tau], axis=1)
    return np.stack([np.full_like(tau, -1.0), tau], axis=1)


def build_trace(mesh, elements) -> TraceMap:
    """Interior and boundary trace segments with outward-from-left normals,
    orientation-corrected value extraction, and modal lift operators."""
    adjacency = {}
    for idx, el in enumerate(elements):
        for le, sid in enumerate(el.edge_segs):
            adjacency.setdefault(sid, []).append((idx, le))
    bc_of_seg = {}
    for name, cids in mesh.boundary.items():
        for cid in cids:
            kind, ids = mesh.composites[cid]
            if kind == "seg":
                for sid in ids:
                    bc_of_seg[sid] = name

    tmap = TraceMap(traces=[])
    for sid in sorted(adjacency):
        sides = adjacency[sid]
        if len(sides) > 2:
            raise AssemblyError(f"segment {sid} shared by {len(sides)} elements")
        left = sides[0]
        right = sides[1] if len(sides) == 2 else None

        q_t = max(elements[i].exp.rules[exp_axis(elements[i].exp, le)].points.size
                  for i, le in sides)
        rule = make_rule(PointsKey(q_t, PointsType.GAUSS_LOBATTO_LEGENDRE))
        s = rule.points

        v0, v1 = mesh.segs[sid]
        curve = mesh.curves.get(sid)
        geom = SegGeom(np.array([mesh.verts[v0][:2], mesh.verts[v1][:2]]),
                       curve_nodes=None if curve is None
                       else np.array([p[:2] for p in curve]),
                       seg_id=sid)
        xy = geom.eval(s)
        arc = geom.arc_jacobian(s)

        def side_ops(i, le):
            el = elements[i]
            fwd = el.edge_forward[le]
            tau = s if fwd else -s
            spec = el.exp.edge_modes[le]
            axis_rule = el.exp.rules[spec["axis"]]
            interp = interp_matrix(axis_rule, tau)
            idx = _edge_line_slicer(el.exp, spec)
            extract = np.zeros((q_t, el.exp.num_points))
            extract[:, idx] = interp
            lift = el.exp.eval_basis_at(_edge_ref_points(el.exp, le, tau))
            return extract, lift

        ex_l, lift_l = side_ops(*left)
        normals = _edge_normals(elements[left[0]], left[1], s)
        trace = TraceSeg(sid, left, right, bc_of_seg.get(sid), q_t, s, xy,
                         normals, rule.weights * arc)
        tmap.traces.append(trace)
        tmap.extract_minus.append(ex_l)
        tmap.lift_minus.append(lift_l)
        if right is not None:
            ex_r, lift_r = side_ops(*right)
            tmap.extract_plus.append(ex_r)
            tmap.lift_plus.append(lift_r)
            tmap.interior.append(len(tmap.traces) - 1)
        else:
            tmap.extract_plus.append(None)
            tmap.lift_plus.append(None)
            tmap.boundary.append(len(tmap.traces) - 1)
    return tmap


def exp_axis(exp, local_edge):
    return exp.edge_modes[local_edge]["axis"]


_REF_NORMALS = {
    "quad": {0: (0.0, -1.0), 1: (1.0, 0.0), 2: (0.0, 1.0), 3: (-1.0, 0.0)},
    "tri": {0: (0.0, -1.0), 1: (1.0, 1.0), 2: (-1.0, 0.0)},
}


def _edge_normals(element, local_edge, s):
    """Unit outward normals of an element edge at trace parameters s."""
    fwd = element.edge_forward[local_edge]
    tau = s if fwd else -s
    xi = _edge_ref_points(element.exp, local_edge, tau)
    # keep evaluation off the collapsed vertex for triangle jacobians
    if element.kind == "tri":
        xi = xi.copy()
        top = xi[:, 1] > 1 - 1e-12
        xi[top, 1] = 1 - 1e-12
        xi[top, 0] = np.minimum(xi[top, 0], -xi[top, 1])
    from .geometry import _jacobian_at

    jac = _jacobian_at(element.geom, xi)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_t = np.empty_like(jac)   # rows of J^{-T}: grad of xi_a
    inv_t[:, 0, 0] = jac[:, 1, 1] / det
    inv_t[:, 0, 1] = -jac[:, 1, 0] / det
    inv_t[:, 1, 0] = -jac[:, 0, 1] / det
    inv_t[:, 1, 1] = jac[:, 0, 0] / det
    n_ref = np.array(_REF_NORMALS[element.kind][local_edge])
    n = inv_t[:, :, 0] * n_ref[0] + inv_t[:, :, 1] * n_ref[1]
    n /= np.linalg.norm(n, axis=1)[:, None]
    return n


def trace_values(tmap: TraceMap, elements, phys_list, trace_idx, side):
    """Physical values of one field on one side of a trace."""
    t = tmap.traces[trace_idx]
    if side == "minus":
        i, _ = t.left
        return tmap.extract_minus[trace_idx] @ phys_list[i]
    i, _ = t.right
    return tmap.extract_plus[trace_idx] @ phys_list[i]


def exchange_trace_values(tmap: TraceMap, elements, phys_list, bc_ghost=None):
    """(u_minus, u_plus) per trace at the trace quadrature points.

    Boundary traces fill u_plus through `bc_ghost(trace, u_minus)`; a
    boundary trace without a handler raises.
    """
    minus, plus = [], []
    for k, t in enumerate(tmap.traces):
        um = tmap.extract_minus[k] @ phys_list[t.left[0]]
        if t.right is not None:
            up = tmap.extract_plus[k] @ phys_list[t.right[0]]
        else:
            if bc_ghost is None:
                raise AssemblyError(
                    f"boundary trace on segment {t.seg_id} "
                    f"(region {t.bc_name!r}) has no boundary condition")
            up = bc_ghost(t, um)
        minus.append(um)
        plus.append(up)
    return minus, plus


def trace_jump(tmap: TraceMap, elements, phys_list):
    """Max |u_minus - u_plus| over interior traces (C0 diagnostics)."""
    worst = 0.0
    for k in tmap.interior:
        t = tmap.traces[k]
        um = tmap.extract_minus[k] @ phys_list[t.left[0]]
        up = tmap.extract_plus[k] @ phys_list[t.right[0]]
        worst = max(worst, float(np.max(np.abs(um - up))))
    return worst
