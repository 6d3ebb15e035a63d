"""Solver drivers: Galerkin projection, explicit DG advection, the acoustic
perturbation system, RK4 time stepping, the modal-energy sensor with
adaptive order, artificial viscosity, and the periodic output filter.

The DG right-hand sides run on stacked arrays over homogeneous element
groups (same shape, order and quadrature); trace exchange, Riemann fluxes
and modal lifts are batched across all trace segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    AssemblyError,
    assemble,
    build_assembly_map,
    build_global_system,
    build_trace,
    scatter,
    solve_pcg,
)
from .fieldio import ensure_writable_dir, snapshot_basename, write_field, write_vtk
from .geometry import (
    element_size,
    integral_world,
    iproduct_world,
    world_mass_matrix,
    x_map,
)
from .stdregions import bwd_trans


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# fields and projection
# ---------------------------------------------------------------------------


@dataclass
class Field:
    """Per-element coefficients of one variable over an expansion list."""

    elements: list
    name: str = "u"
    coeffs: list = field(default_factory=list)

    def __post_init__(self):
        if not self.coeffs:
            self.coeffs = [np.zeros(el.num_modes) for el in self.elements]
        for el, c in zip(self.elements, self.coeffs):
            if len(c) != el.num_modes:
                raise SolverError(
                    f"element {el.eid}: coefficient length {len(c)} does not "
                    f"match expansion ({el.num_modes} modes)")

    def phys(self):
        return [bwd_trans(el.exp, c) for el, c in zip(self.elements, self.coeffs)]

    def integral(self):
        return sum(integral_world(el.exp, el.gf, p)
                   for el, p in zip(self.elements, self.phys()))


def constant_coeffs(exp, value):
    """Exact coefficients of a constant: the vertex modes sum to one."""
    c = np.zeros(exp.num_modes)
    for v in exp.vertex_modes:
        c[v] = value
    return c


def sample(elements, fn, t=0.0):
    """Per-element samples of fn(x, y[, t]) at the world quadrature points."""
    out = []
    for el in elements:
        xy = np.atleast_2d(x_map(el.geom, el.exp.points))
        try:
            vals = fn(x=xy[:, 0], y=xy[:, 1], t=t)
        except TypeError:
            vals = fn(xy[:, 0], xy[:, 1])
        out.append(np.broadcast_to(np.asarray(vals, float), (el.num_points,)).copy())
    return out


def parallel_map(fn, items, threads=1):
    """Map with an optional worker pool; results keep item order, so runs
    are reproducible at any thread count."""
    if threads <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def project(elements, fn, mode="dg", mesh=None, t=0.0, threads=1):
    """Galerkin projection of fn onto the expansion list.

    DG mode projects element by element; CG mode solves the assembled
    global mass system so the result is C0.
    """
    phys = sample(elements, fn, t)
    if mode == "dg":
        def one(pair):
            el, p = pair
            m = world_mass_matrix(el.exp, el.gf)
            return np.linalg.solve(m, iproduct_world(el.exp, el.gf, p))

        return parallel_map(one, list(zip(elements, phys)), threads)
    if mesh is None:
        raise SolverError("CG projection needs the mesh")
    amap = build_assembly_map(mesh, elements)
    system = build_global_system(elements, amap, kind="mass")
    rhs = assemble(amap, [iproduct_world(el.exp, el.gf, p)
                          for el, p in zip(elements, phys)])
    x = solve_pcg(system, rhs, tol=1e-13, max_iter=5000)
    return scatter(amap, x)


# ---------------------------------------------------------------------------
# Riemann fluxes for the acoustic system
# ---------------------------------------------------------------------------


def ape_flux_normal(q, normal, base):
    """F(q) . n for the acoustic system; q = (p, ux, uy) stacked last axis."""
    p, ux, uy = q[..., 0], q[..., 1], q[..., 2]
    nx, ny = normal[..., 0], normal[..., 1]
    un = ux * nx + uy * ny
    ubn = base["ux"] * nx + base["uy"] * ny
    h = base["ux"] * ux + base["uy"] * uy + p / base["rho"]
    fp = base["c2"] * base["rho"] * un + ubn * p
    return np.stack([fp, h * nx, h * ny], axis=-1)


def riemann_flux(kind, q_minus, q_plus, normal, base):
    """Numerical trace flux for the acoustic system.

    kind: "laxfriedrichs" or "upwind".  `base` holds trace-sampled mean
    flow: ux, uy, rho, c2.  Consistent (equal states reproduce F(q).n) and
    valid for nonzero mean flow in both variants.
    """
    q_minus = np.asarray(q_minus, float)
    q_plus = np.asarray(q_plus, float)
    central = 0.5 * (ape_flux_normal(q_minus, normal, base)
                     + ape_flux_normal(q_plus, normal, base))
    nx, ny = normal[..., 0], normal[..., 1]
    cbar = np.sqrt(base["c2"])
    ubn = base["ux"] * nx + base["uy"] * ny
    if kind == "laxfriedrichs":
        lam = np.abs(ubn) + cbar
        return central - 0.5 * lam[..., None] * (q_plus - q_minus)
    if kind != "upwind":
        raise SolverError(f"unknown Riemann flux kind {kind!r}")
    # characteristic decomposition in the trace-normal frame
    tx, ty = -ny, nx
    ubt = base["ux"] * tx + base["uy"] * ty
    dp = q_plus[..., 0] - q_minus[..., 0]
    dux = q_plus[..., 1] - q_minus[..., 1]
    duy = q_plus[..., 2] - q_minus[..., 2]
    dun = dux * nx + duy * ny
    dut = dux * tx + duy * ty
    z = base["rho"] * cbar
    mu_p = ubn + cbar
    mu_m = ubn - cbar
    a_p = np.abs(mu_p) * (dp + z * dun) / (2 * z) + np.sign(mu_p) * ubt * dut / 2
    a_m = np.abs(mu_m) * (dp - z * dun) / (2 * z) - np.sign(mu_m) * ubt * dut / 2
    diss_p = a_p * z + a_m * z
    diss_un = a_p - a_m
    out = central.copy()
    out[..., 0] -= 0.5 * diss_p
    out[..., 1] -= 0.5 * diss_un * nx
    out[..., 2] -= 0.5 * diss_un * ny
    return out


# ---------------------------------------------------------------------------
# batched DG context
# ---------------------------------------------------------------------------


class DGSystem:
    """Stacked DG operator data over a homogeneous element group.

    `strategy` selects the grouped-evaluation path for the transform and
    inner-product kernels ("stdmat", "iterperexp", "sumfac", or "auto",
    which times the candidates once at setup)."""

    def __init__(self, mesh, elements, bcs=None, strategy="stdmat"):
        exp = elements[0].exp
        for el in elements:
            if el.exp.basis_keys != exp.basis_keys or el.exp.shape is not exp.shape:
                raise SolverError("DG fast path needs a homogeneous element "
                                  "group (same shape, order, quadrature)")
        self.mesh = mesh
        self.elements = elements
        self.exp = exp
        self.bcs = dict(bcs or {})
        self.B = exp.bwd_matrix
        self.bd1, self.bd2 = exp.deriv_bwd_matrices
        self.ww = np.stack([el.gf.weights_world for el in elements])
        self.inv = np.stack([el.gf.inv for el in elements])
        self.minv = np.stack([np.linalg.inv(world_mass_matrix(exp, el.gf))
                              for el in elements])
        self.xy = np.stack([np.atleast_2d(x_map(el.geom, exp.points))
                            for el in elements])
        self._setup_collections(strategy)
        self._build_traces()

    def _setup_collections(self, strategy):
        from .collections import (OperatorKind, Strategy, autotune,
                                  create_collection)

        table = {s.value: s for s in (Strategy.STD_MAT, Strategy.ITER_PER_EXP,
                                      Strategy.SUM_FAC, Strategy.AUTO)}
        if strategy not in table:
            raise SolverError(f"unknown collections strategy {strategy!r}")
        strat = table[strategy]
        if strat is Strategy.AUTO:
            strat, _ = autotune(self.elements, OperatorKind.BWD_TRANS,
                                trials=3, warmups=1)
        self.strategy = strat
        self._bwd_coll = create_collection(self.elements,
                                           OperatorKind.BWD_TRANS, strat)
        self._ip_coll = create_collection(self.elements,
                                          OperatorKind.IPRODUCT_WRT_BASE,
                                          strat)

    # -- traces --------------------------------------------------------------

    def _build_traces(self):
        tmap = build_trace(self.mesh, self.elements)
        self.tmap = tmap
        interior = list(tmap.interior)
        boundary = {}
        for k in tmap.boundary:
            t = tmap.traces[k]
            if t.bc_name is None:
                raise AssemblyError(
                    f"boundary segment {t.seg_id} lies in no boundary region")
            boundary.setdefault(t.bc_name, []).append(k)

        # periodic pairs turn into interior-style couplings
        self._periodic_extra = []
        done = set()
        for name, spec in self.bcs.items():
            if spec.get("type") != "periodic" or name in done:
                continue
            pair = spec["pair"]
            done.update((name, pair))
            a_list = boundary.pop(name, [])
            b_list = boundary.pop(pair, [])
            self._periodic_extra.extend(
                self._match_periodic(tmap, a_list, b_list))

        q_t = {tmap.traces[k].num_points for k in range(len(tmap.traces))}
        if len(q_t) != 1:
            raise SolverError("DG fast path needs a single trace quadrature")

        tr = tmap.traces
        li, ri = [], []
        exm, lm, exp_, lp, nrm, warc, xy = [], [], [], [], [], [], []
        for k in interior:
            li.append(tr[k].left[0])
            ri.append(tr[k].right[0])
            exm.append(tmap.extract_minus[k])
            lm.append(tmap.lift_minus[k])
            exp_.append(tmap.extract_plus[k])
            lp.append(tmap.lift_plus[k])
            nrm.append(tr[k].normals)
            warc.append(tr[k].weights_arc)
            xy.append(tr[k].points_world)
        for a_k, b_k, flip in self._periodic_extra:
            exb = tmap.extract_minus[b_k]
            lfb = tmap.lift_minus[b_k]
            if flip:
                exb = exb[::-1]
                lfb = lfb[:, ::-1]
            li.append(tr[a_k].left[0])
            ri.append(tr[b_k].left[0])
            exm.append(tmap.extract_minus[a_k])
            lm.append(tmap.lift_minus[a_k])
            exp_.append(exb)
            lp.append(lfb)
            nrm.append(tr[a_k].normals)
            warc.append(tr[a_k].weights_arc)
            xy.append(tr[a_k].points_world)
        self.int_li = np.array(li, dtype=int)
        self.int_ri = np.array(ri, dtype=int)
        if li:
            self.int_exm = np.stack(exm)
            self.int_lm = np.stack(lm)
            self.int_exp = np.stack(exp_)
            self.int_lp = np.stack(lp)
            self.int_nrm = np.stack(nrm)
            self.int_warc = np.stack(warc)
            self.int_xy = np.stack(xy)

        self.bnd = {}
        for name, idx_list in boundary.items():
            if name in self.bcs and self.bcs[name].get("type") == "periodic":
                continue
            self.bnd[name] = {
                "idx": idx_list,
                "li": np.array([tr[k].left[0] for k in idx_list], dtype=int),
                "exm": np.stack([tmap.extract_minus[k] for k in idx_list]),
                "lm": np.stack([tmap.lift_minus[k] for k in idx_list]),
                "nrm": np.stack([tr[k].normals for k in idx_list]),
                "warc": np.stack([tr[k].weights_arc for k in idx_list]),
                "xy": np.stack([tr[k].points_world for k in idx_list]),
            }

    def _match_periodic(self, tmap, a_list, b_list):
        """Pair boundary traces of two regions related by a translation."""
        if len(a_list) != len(b_list):
            raise SolverError("periodic regions have different trace counts")
        tr = tmap.traces
        mid = lambda k: tr[k].points_world.mean(axis=0)
        offset = (np.mean([mid(k) for k in b_list], axis=0)
                  - np.mean([mid(k) for k in a_list], axis=0))
        # translation must be axis-aligned with zero mean tangential shift
        pairs = []
        used = set()
        for a_k in a_list:
            target = mid(a_k) + offset
            best, dist = None, np.inf
            for b_k in b_list:
                if b_k in used:
                    continue
                d = np.linalg.norm(mid(b_k) - target)
                if d < dist:
                    best, dist = b_k, d
            if dist > 1e-8:
                raise SolverError("periodic trace matching failed "
                                  f"(residual {dist:.2e})")
            used.add(best)
            first_a = tr[a_k].points_world[0] + offset
            flip = not np.allclose(tr[best].points_world[0], first_a,
                                   atol=1e-8)
            pairs.append((a_k, best, flip))
        return pairs

    # -- batched primitives -----------------------------------------------------

    def bwd(self, coeffs):
        return self._bwd_coll.apply(np.ascontiguousarray(coeffs))

    def mass_solve(self, b):
        return np.einsum("emn,en->em", self.minv, b, optimize=True)

    def iproduct(self, phys):
        return self._ip_coll.apply(np.ascontiguousarray(phys))

    def iproduct_deriv(self, fx, fy):
        """b_n = int grad(phi_n) . (fx, fy) per element (batched)."""
        gx = self.ww * (self.inv[:, :, 0, 0] * fx + self.inv[:, :, 0, 1] * fy)
        gy = self.ww * (self.inv[:, :, 1, 0] * fx + self.inv[:, :, 1, 1] * fy)
        return gx @ self.bd1.T + gy @ self.bd2.T

    def trace_minus(self, phys):
        return np.einsum("tqn,tn->tq", self.int_exm, phys[self.int_li],
                         optimize=True)

    def trace_plus(self, phys):
        return np.einsum("tqn,tn->tq", self.int_exp, phys[self.int_ri],
                         optimize=True)

    def lift_interior(self, b, s):
        """Accumulate the surface term of a single flux s (T, Q) into b."""
        np.add.at(b, self.int_li,
                  -np.einsum("tnq,tq->tn", self.int_lm,
                             self.int_warc * s, optimize=True))
        np.add.at(b, self.int_ri,
                  np.einsum("tnq,tq->tn", self.int_lp,
                            self.int_warc * s, optimize=True))

    def lift_boundary(self, b, name, s):
        grp = self.bnd[name]
        np.add.at(b, grp["li"],
                  -np.einsum("tnq,tq->tn", grp["lm"], grp["warc"] * s,
                             optimize=True))

    @property
    def num_interior(self):
        return len(self.int_li)


# ---------------------------------------------------------------------------
# DG advection
# ---------------------------------------------------------------------------


class AdvectionOperator:
    """du/dt = -div(a u) in DG form with upwind trace fluxes; the velocity
    field is assumed divergence-free."""

    def __init__(self, system: DGSystem, velocity, bcs=None):
        self.sys = system
        self.bcs = dict(bcs or system.bcs)
        ax, ay = velocity
        xy = system.xy
        self.ax = np.asarray(ax(x=xy[..., 0], y=xy[..., 1], t=0.0), float) \
            * np.ones(xy.shape[:2])
        self.ay = np.asarray(ay(x=xy[..., 0], y=xy[..., 1], t=0.0), float) \
            * np.ones(xy.shape[:2])
        txy = system.int_xy
        anx = ax(x=txy[..., 0], y=txy[..., 1], t=0.0) * np.ones(txy.shape[:2])
        any_ = ay(x=txy[..., 0], y=txy[..., 1], t=0.0) * np.ones(txy.shape[:2])
        self.an_int = anx * system.int_nrm[..., 0] + any_ * system.int_nrm[..., 1]
        self.an_bnd = {}
        for name, grp in system.bnd.items():
            bx = ax(x=grp["xy"][..., 0], y=grp["xy"][..., 1], t=0.0) \
                * np.ones(grp["xy"].shape[:2])
            by = ay(x=grp["xy"][..., 0], y=grp["xy"][..., 1], t=0.0) \
                * np.ones(grp["xy"].shape[:2])
            self.an_bnd[name] = bx * grp["nrm"][..., 0] + by * grp["nrm"][..., 1]

    def rhs(self, coeffs, t=0.0):
        sys = self.sys
        u = sys.bwd(coeffs)
        b = sys.iproduct_deriv(self.ax * u, self.ay * u)
        if sys.num_interior:
            um = sys.trace_minus(u)
            up = sys.trace_plus(u)
            an = self.an_int
            flux = an * np.where(an >= 0, um, up)
            sys.lift_interior(b, flux)
        for name, grp in sys.bnd.items():
            spec = self.bcs.get(name)
            if spec is None:
                raise SolverError(f"no boundary condition for region {name!r}")
            um = np.einsum("tqn,tn->tq", grp["exm"], u[grp["li"]],
                           optimize=True)
            if spec["type"] == "dirichlet":
                g = spec["value"]
                gv = g(x=grp["xy"][..., 0], y=grp["xy"][..., 1], t=t) \
                    * np.ones_like(um)
                up = 2.0 * gv - um
            elif spec["type"] == "farfield":
                up = np.zeros_like(um)
            else:
                raise SolverError(
                    f"bc type {spec['type']!r} unsupported for advection")
            an = self.an_bnd[name]
            flux = an * np.where(an >= 0, um, up)
            sys.lift_boundary(b, name, flux)
        return sys.mass_solve(b)


def advect_dg_rhs(system: DGSystem, velocity, coeffs, bcs=None, t=0.0):
    """One-shot advection right-hand side (coefficient space)."""
    return AdvectionOperator(system, velocity, bcs).rhs(coeffs, t)


# ---------------------------------------------------------------------------
# acoustic perturbation system
# ---------------------------------------------------------------------------


@dataclass
class ApeState:
    """Acoustic state: pressure and velocity perturbation coefficients plus
    trace/volume-sampled base flow and optional sources."""

    system: DGSystem
    coeffs: np.ndarray            # (3, E, nmodes): p, ux, uy
    base: dict                    # volume base-flow arrays (E, npts)
    base_trace: dict              # interior-trace base-flow arrays (T, Q)
    base_bnd: dict                # per-region base-flow arrays
    sources: dict                 # var -> Expression or None
    riemann: str = "upwind"
    time: float = 0.0
    c2_elementwise_constant: bool = False
    c2_per_element: np.ndarray | None = None

    @property
    def pressure(self):
        return self.coeffs[0]


def make_ape_state(system: DGSystem, base_flow, initial=None, sources=None,
                   riemann="upwind") -> ApeState:
    """Sample base flow at volume and trace points and validate it."""

    def eval_at(xy, expr):
        vals = expr(x=xy[..., 0], y=xy[..., 1], t=0.0)
        return np.asarray(vals, float) * np.ones(xy.shape[:-1])

    base = {k: eval_at(system.xy, base_flow[k])
            for k in ("ux", "uy", "rho", "c2")}
    if np.any(base["rho"] <= 0) or np.any(base["c2"] <= 0):
        raise SolverError("base flow must have positive density and "
                          "squared sound speed")
    base_trace = {}
    if system.num_interior:
        base_trace = {k: eval_at(system.int_xy, base_flow[k])
                      for k in ("ux", "uy", "rho", "c2")}
    base_bnd = {name: {k: eval_at(grp["xy"], base_flow[k])
                       for k in ("ux", "uy", "rho", "c2")}
                for name, grp in system.bnd.items()}

    nelem = len(system.elements)
    coeffs = np.zeros((3, nelem, system.exp.num_modes))
    if initial:
        for i, var in enumerate(("p", "ux", "uy")):
            if var in initial:
                stacked = np.stack(project(system.elements, initial[var]))
                coeffs[i] = stacked
    c2 = base["c2"]
    spread = np.max(c2, axis=1) - np.min(c2, axis=1)
    constant = bool(np.all(spread <= 1e-12 * np.max(np.abs(c2))))
    return ApeState(system, coeffs, base, base_trace, base_bnd,
                    dict(sources or {}), riemann,
                    c2_elementwise_constant=constant,
                    c2_per_element=c2[:, 0].copy() if constant else None)


def _ghost_state(spec, q_minus, normal, xy, t):
    kind = spec["type"]
    if kind == "rigid_wall":
        un = (q_minus[..., 1] * normal[..., 0]
              + q_minus[..., 2] * normal[..., 1])
        ghost = q_minus.copy()
        ghost[..., 1] -= 2.0 * un * normal[..., 0]
        ghost[..., 2] -= 2.0 * un * normal[..., 1]
        return ghost
    if kind == "farfield":
        return np.zeros_like(q_minus)
    if kind == "dirichlet":
        g = spec["value"]
        gv = g(x=xy[..., 0], y=xy[..., 1], t=t)
        ghost = np.zeros_like(q_minus)
        ghost[..., 0] = 2.0 * gv - q_minus[..., 0]
        ghost[..., 1:] = q_minus[..., 1:]
        return ghost
    raise SolverError(f"bc type {kind!r} unsupported for the acoustic system")


def ape_rhs(state: ApeState, coeffs=None, t=None):
    """Time derivative of (p, ux, uy) coefficients for the acoustic system:
    dp/dt = -c2 div(rho u + ub p / c2) + source_p,
    du/dt = -grad(ub . u + p / rho) + source_u."""
    sys = state.system
    coeffs = state.coeffs if coeffs is None else coeffs
    t = state.time if t is None else t
    base = state.base
    p = sys.bwd(coeffs[0])
    ux = sys.bwd(coeffs[1])
    uy = sys.bwd(coeffs[2])

    gx = base["rho"] * ux + base["ux"] * p / base["c2"]
    gy = base["rho"] * uy + base["uy"] * p / base["c2"]
    h = base["ux"] * ux + base["uy"] * uy + p / base["rho"]

    b_div = -sys.iproduct_deriv(gx, gy)   # accumulates (div G, v)
    b_gx = -sys.iproduct_deriv(h, np.zeros_like(h))
    b_gy = -sys.iproduct_deriv(np.zeros_like(h), h)

    def surface(q_m, q_p, normal, warc, base_tr, lift_m, li, lift_p=None,
                ri=None, b_accum=None):
        flux = riemann_flux(state.riemann, q_m, q_p, normal, base_tr)
        gdotn = flux[..., 0] / base_tr["c2"]
        sp = warc * gdotn
        sx = warc * flux[..., 1]
        sy = warc * flux[..., 2]
        bd, bx, by = b_accum
        np.add.at(bd, li, np.einsum("tnq,tq->tn", lift_m, sp, optimize=True))
        np.add.at(bx, li, np.einsum("tnq,tq->tn", lift_m, sx, optimize=True))
        np.add.at(by, li, np.einsum("tnq,tq->tn", lift_m, sy, optimize=True))
        if lift_p is not None:
            np.add.at(bd, ri, -np.einsum("tnq,tq->tn", lift_p, sp,
                                         optimize=True))
            np.add.at(bx, ri, -np.einsum("tnq,tq->tn", lift_p, sx,
                                         optimize=True))
            np.add.at(by, ri, -np.einsum("tnq,tq->tn", lift_p, sy,
                                         optimize=True))

    accum = (b_div, b_gx, b_gy)
    if sys.num_interior:
        q_m = np.stack([sys.trace_minus(p), sys.trace_minus(ux),
                        sys.trace_minus(uy)], axis=-1)
        q_p = np.stack([sys.trace_plus(p), sys.trace_plus(ux),
                        sys.trace_plus(uy)], axis=-1)
        surface(q_m, q_p, sys.int_nrm, sys.int_warc, state.base_trace,
                sys.int_lm, sys.int_li, sys.int_lp, sys.int_ri, accum)
    for name, grp in sys.bnd.items():
        spec = state.system.bcs.get(name)
        if spec is None:
            raise SolverError(f"no boundary condition for region {name!r}")
        ex, li = grp["exm"], grp["li"]
        q_m = np.stack([np.einsum("tqn,tn->tq", ex, v[li], optimize=True)
                        for v in (p, ux, uy)], axis=-1)
        q_p = _ghost_state(spec, q_m, grp["nrm"], grp["xy"], t)
        flux = riemann_flux(state.riemann, q_m, q_p, grp["nrm"],
                            state.base_bnd[name])
        sp = grp["warc"] * flux[..., 0] / state.base_bnd[name]["c2"]
        sx = grp["warc"] * flux[..., 1]
        sy = grp["warc"] * flux[..., 2]
        np.add.at(b_div, li, np.einsum("tnq,tq->tn", grp["lm"], sp,
                                       optimize=True))
        np.add.at(b_gx, li, np.einsum("tnq,tq->tn", grp["lm"], sx,
                                      optimize=True))
        np.add.at(b_gy, li, np.einsum("tnq,tq->tn", grp["lm"], sy,
                                      optimize=True))

    rhs = np.empty_like(coeffs)
    src_p = None
    if state.sources.get("p") is not None:
        src = state.sources["p"]
        src_p = src(x=sys.xy[..., 0], y=sys.xy[..., 1], t=t) \
            * np.ones(sys.xy.shape[:2])
    if state.c2_elementwise_constant:
        # pull the per-element constant c2 through the mass solve: one solve
        # instead of two keeps round-off noise near machine level
        b_p = -state.c2_per_element[:, None] * b_div
        if src_p is not None:
            b_p = b_p + sys.iproduct(src_p)
        rhs[0] = sys.mass_solve(b_p)
    else:
        # pointwise c2: fold it through the physical values of div G
        div_g = sys.bwd(sys.mass_solve(b_div))
        rp = -base["c2"] * div_g
        if src_p is not None:
            rp = rp + src_p
        rhs[0] = sys.mass_solve(sys.iproduct(rp))
    grads = (b_gx, b_gy)
    for i, (bg, var) in enumerate(zip(grads, ("ux", "uy")), start=1):
        rc = -sys.mass_solve(bg)
        if state.sources.get(var) is not None:
            src = state.sources[var]
            sv = src(x=sys.xy[..., 0], y=sys.xy[..., 1], t=t) \
                * np.ones(sys.xy.shape[:2])
            rc = rc + sys.mass_solve(sys.iproduct(sv))
        rhs[i] = rc
    return rhs


def acoustic_energy(state: ApeState):
    """Discrete integral of p^2/(2 rho c2) + rho |u|^2 / 2."""
    sys = state.system
    p = sys.bwd(state.coeffs[0])
    ux = sys.bwd(state.coeffs[1])
    uy = sys.bwd(state.coeffs[2])
    dens = (p * p / (2.0 * state.base["rho"] * state.base["c2"])
            + 0.5 * state.base["rho"] * (ux * ux + uy * uy))
    return float(np.sum(sys.ww * dens))


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------


def rk4_step(state, rhs, t, dt):
    """Classical four-stage Runge-Kutta update of an array state.

    Aborts with the failing stage index when a NaN appears."""
    if dt <= 0:
        raise SolverError("dt must be positive")
    state = np.asarray(state, dtype=float)

    def guard(k, stage):
        if not np.all(np.isfinite(k)):
            raise SolverError(f"NaN detected in RK4 stage {stage} at t={t}")
        return k

    k1 = guard(np.asarray(rhs(state, t)), 1)
    k2 = guard(np.asarray(rhs(state + 0.5 * dt * k1, t + 0.5 * dt)), 2)
    k3 = guard(np.asarray(rhs(state + 0.5 * dt * k2, t + 0.5 * dt)), 3)
    k4 = guard(np.asarray(rhs(state + dt * k3, t + dt)), 4)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# sensor, adaptivity, artificial viscosity
# ---------------------------------------------------------------------------


@dataclass
class SensorReport:
    values: np.ndarray            # per-element sensor
    orders: list                  # per-element current order


def sensor(elements, coeffs) -> SensorReport:
    """Relative energy of the top-degree modes per element:
    ||u_P - u_{P-1}||^2 / ||u_P||^2 with hierarchical truncation."""
    values = np.zeros(len(elements))
    orders = []
    for i, (el, c) in enumerate(zip(elements, coeffs)):
        P = el.order
        if P < 2:
            raise SolverError("sensor needs per-element order >= 2")
        orders.append(P)
        keep = el.exp.mode_degrees < P
        dropped = np.where(keep, 0.0, np.asarray(c, float))
        u = bwd_trans(el.exp, np.asarray(c, float))
        d = bwd_trans(el.exp, dropped)
        den = integral_world(el.exp, el.gf, u * u)
        num = integral_world(el.exp, el.gf, d * d)
        values[i] = 0.0 if den == 0.0 else num / den
    return SensorReport(values, orders)


def adapt_p(mesh, elements, coeffs, report: SensorReport, threshold_hi,
            threshold_lo, p_min, p_max):
    """Raise the order where the sensor exceeds threshold_hi, lower it where
    it stays under threshold_lo, clamp to [p_min, p_max], and transfer the
    field by Galerkin projection onto the new expansions."""
    if threshold_lo > threshold_hi:
        raise SolverError("threshold_lo must not exceed threshold_hi")
    from .region import build_elements

    new_orders = {}
    for el, s in zip(elements, report.values):
        p = el.order
        if s > threshold_hi:
            p += 1
        elif s < threshold_lo:
            p -= 1
        new_orders[(el.kind, el.eid)] = int(np.clip(p, p_min, p_max))
    new_elements = build_elements(mesh, orders=new_orders)
    new_coeffs = []
    for old, new, c in zip(elements, new_elements, coeffs):
        if new.order == old.order:
            new_coeffs.append(np.array(c, float))
            continue
        vals = np.asarray(c, float) @ old.exp.eval_basis_at(new.exp.points)
        m = world_mass_matrix(new.exp, new.gf)
        new_coeffs.append(np.linalg.solve(
            m, iproduct_world(new.exp, new.gf, vals)))
    return new_elements, new_coeffs, new_orders


@dataclass
class AvReport:
    eps: np.ndarray
    eps0: float
    h: np.ndarray
    p: np.ndarray
    lam_max: np.ndarray
    sensor: np.ndarray


def artificial_viscosity(elements, coeffs, eps0, lam_max) -> AvReport:
    """Per-element diffusion coefficient eps = eps0 * (h/p) * lam_max * S."""
    if eps0 < 0:
        raise SolverError("eps0 must be nonnegative")
    rep = sensor(elements, coeffs)
    h = np.array([element_size(el.geom) for el in elements])
    p = np.array([el.order for el in elements], dtype=float)
    lam = np.broadcast_to(np.asarray(lam_max, float), (len(elements),))
    eps = eps0 * (h / p) * lam * rep.values
    return AvReport(eps, eps0, h, p, lam.copy(), rep.values)


# ---------------------------------------------------------------------------
# output filter
# ---------------------------------------------------------------------------


class OutputFilter:
    """Writes field snapshots every N steps (steps 0, N, 2N, ...) without
    touching solver state."""

    def __init__(self, every, path, fmt="nfj", prefix="field", density=None):
        if every < 1:
            raise SolverError("output cadence must be >= 1")
        ensure_writable_dir(path)
        self.every = int(every)
        self.path = path
        self.fmt = fmt
        self.prefix = prefix
        self.density = density
        self.written = []

    def __call__(self, step, time, elements, named_coeffs):
        if step % self.every:
            return
        import os

        base = os.path.join(self.path, snapshot_basename(self.prefix, step))
        if self.fmt == "vtk":
            out = base + ".vtk"
            write_vtk(out, elements, named_coeffs, density=self.density)
        else:
            out = base + ".nfj"
            write_field(out, {name: (elements, coeffs)
                              for name, coeffs in named_coeffs.items()},
                        time=time, step=step)
        self.written.append(out)


def run_time_loop(state_coeffs, rhs, dt, steps, t0=0.0, observers=()):
    """Sequential RK4 loop; observers run at step k before advancing."""
    t = t0
    coeffs = np.asarray(state_coeffs, dtype=float)
    for step in range(steps + 1):
        for obs in observers:
            obs(step, t, coeffs)
        if step == steps:
            break
        coeffs = rk4_step(coeffs, rhs, t, dt)
        t += dt
    return coeffs, t
