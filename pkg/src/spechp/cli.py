"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Errors go to
standard error; results and reports go to files or standard output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="spechp", description="compact spectral element kernel")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (default 1: deterministic)")
    sub = p.add_subparsers(dest="command")

    def common(sp, session=True, mesh=False, out=True):
        # also accepted after the subcommand; SUPPRESS keeps the top-level
        # value when the subcommand omits them
        sp.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        if session:
            sp.add_argument("--session", required=True)
            sp.add_argument("--param", action="append", default=[],
                            metavar="NAME=VALUE",
                            help="override a numeric session parameter")
        if mesh:
            sp.add_argument("--mesh", required=True)
        if out:
            sp.add_argument("--out", default="out")

    common(sub.add_parser("project", help="Galerkin projection of an expression"))
    common(sub.add_parser("solve-helmholtz", help="CG Helmholtz solve"))
    common(sub.add_parser("solve-advect", help="explicit DG advection"))
    common(sub.add_parser("solve-ape", help="acoustic perturbation solver"))

    sp = sub.add_parser("partition", help="partition a mesh")
    common(sp, session=False, mesh=True)
    sp.add_argument("--parts", type=int, required=True)

    sp = sub.add_parser("bench-collections", help="time operator strategies")
    common(sp)
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--warmups", type=int, default=2)

    sp = sub.add_parser("mesh-info", help="print mesh counts")
    common(sp, session=False, mesh=True, out=False)

    sp = sub.add_parser("convert", help="field snapshot to legacy VTK")
    common(sp, session=False, mesh=True)
    sp.add_argument("--field", required=True)
    sp.add_argument("--density", type=int, default=None)
    return p


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        try:
            out[name] = float(value)
        except ValueError:
            raise UsageError(f"--param {name}: {value!r} is not numeric")
    return out


def _load(args):
    from .region import build_elements
    from .session import parse_session

    ses = parse_session(args.session, overrides=_parse_overrides(
        getattr(args, "param", [])))
    elements = build_elements(ses.mesh, orders=ses.orders,
                              num_points=ses.num_points)
    return ses, elements


def _field_paths(out_dir, name="field"):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, f"{name}.nfj")


def _echo(ses, verbose):
    if verbose:
        for key, val in sorted(ses.derived.items()):
            print(f"{key} = {val:.6g}")


def cmd_project(args):
    from .fieldio import write_field
    from .geometry import integral_world
    from .solvers import project, sample

    ses, elements = _load(args)
    if ses.expression is None:
        raise UsageError("project needs an 'expression' entry in the session")
    _echo(ses, args.verbose)
    mode = ses.solver.get("mode", "dg")
    coeffs = project(elements, ses.expression, mode=mode, mesh=ses.mesh,
                     threads=args.threads)
    sweeps = 0
    if ses.adaptivity:
        from .solvers import adapt_p, sensor

        adapt = ses.adaptivity
        # for a steady projection the cadence counts refinement sweeps
        for _ in range(int(adapt["every"])):
            rep = sensor(elements, coeffs)
            before = [el.order for el in elements]
            elements, _, _ = adapt_p(
                ses.mesh, elements, coeffs, rep, adapt["hi"], adapt["lo"],
                adapt["p_min"], adapt["p_max"])
            coeffs = project(elements, ses.expression, mode=mode,
                             mesh=ses.mesh, threads=args.threads)
            sweeps += 1
            if [el.order for el in elements] == before:
                break
    phys = sample(elements, ses.expression)
    total = sum(integral_world(el.exp, el.gf, p)
                for el, p in zip(elements, phys))
    print(f"Integral = {total:.10f}")
    out = _field_paths(args.out)
    write_field(out, {"u": (elements, coeffs)})
    report = {"integral": total,
              "num_elements": len(elements),
              "mode": mode,
              "orders": {str(el.eid): el.order for el in elements},
              "adapt_sweeps": sweeps,
              "field": out}
    with open(os.path.join(args.out, "project_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_solve_helmholtz(args):
    from .assembly import helmholtz_solve
    from .fieldio import write_field
    from .solvers import sample

    ses, elements = _load(args)
    _echo(ses, args.verbose)
    lam = float(ses.solver.get("lambda", 1.0))
    forcing_expr = ses.sources.get("u") or ses.expression
    if forcing_expr is None:
        raise UsageError("helmholtz needs a forcing: sources.u or expression")
    forcing = sample(elements, forcing_expr)
    dirichlet = {}
    for name, spec in ses.bcs.items():
        if spec["type"] != "dirichlet":
            raise UsageError("helmholtz supports dirichlet regions only")
        g = spec["value"]
        dirichlet[name] = (lambda g: lambda x, y: g(x=x, y=y, t=0.0))(g)
    tol = float(ses.solver.get("tol", 1e-12))
    coeffs, info = helmholtz_solve(ses.mesh, elements, lam, forcing,
                                   dirichlet, tol=tol)
    out = _field_paths(args.out)
    write_field(out, {"u": (elements, coeffs)})
    print(f"Solved: {info['amap'].num_global} dofs "
          f"({info['num_dirichlet']} Dirichlet)")
    return 0


def _observers(ses, elements, out_dir):
    from .solvers import OutputFilter

    filters = []
    for spec in ses.filters:
        path = os.path.join(out_dir, spec["path"])
        filters.append((OutputFilter(spec["every"], path, fmt=spec["format"]),
                        spec.get("fields")))
    return filters


def cmd_solve_advect(args):
    from .fieldio import write_field
    from .solvers import AdvectionOperator, DGSystem, project, run_time_loop

    ses, elements = _load(args)
    _echo(ses, args.verbose)
    if len(ses.velocity) != 2:
        raise UsageError("advection needs a two-entry 'velocity' list")
    if "u" not in ses.fields:
        raise UsageError("advection needs an initial condition fields.u")
    system = DGSystem(ses.mesh, elements, ses.bcs,
                      strategy=ses.collections_default)
    op = AdvectionOperator(system, ses.velocity)
    coeffs = np.stack(project(elements, ses.fields["u"]))
    dt = float(ses.solver["dt"])
    steps = int(ses.solver["steps"])

    total0 = float(np.sum(system.ww * system.bwd(coeffs)))
    filters = _observers(ses, elements, args.out)
    obs = [(lambda f: lambda step, t, c: f(step, t, elements,
                                           {"u": list(c)}))(f)
           for f, _ in filters]
    final, t_end = run_time_loop(coeffs, op.rhs, dt, steps, observers=obs)
    total1 = float(np.sum(system.ww * system.bwd(final)))
    out = _field_paths(args.out)
    write_field(out, {"u": (elements, list(final))}, time=t_end, step=steps)
    report = {"steps": steps, "dt": dt, "final_time": t_end,
              "integral_initial": total0, "integral_final": total1,
              "integral_drift": abs(total1 - total0)}
    with open(os.path.join(args.out, "advect_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"Advected {steps} steps, integral drift "
          f"{report['integral_drift']:.3e}")
    return 0


def cmd_solve_ape(args):
    from .fieldio import write_field
    from .solvers import (DGSystem, acoustic_energy, ape_rhs, make_ape_state,
                          run_time_loop)

    ses, elements = _load(args)
    _echo(ses, args.verbose)
    needed = ("ux", "uy", "rho", "c2")
    if any(k not in ses.base_flow for k in needed):
        raise UsageError(f"acoustic solver needs base_flow entries {needed}")
    system = DGSystem(ses.mesh, elements, ses.bcs,
                      strategy=ses.collections_default)
    sources = {"p": ses.sources.get("p"), "ux": ses.sources.get("ux"),
               "uy": ses.sources.get("uy")}
    state = make_ape_state(system, ses.base_flow, initial=ses.fields,
                           sources=sources,
                           riemann=ses.solver.get("riemann", "upwind"))
    dt = float(ses.solver["dt"])
    steps = int(ses.solver["steps"])
    e0 = acoustic_energy(state)

    filters = _observers(ses, elements, args.out)

    def snapshot(step, t, coeffs):
        named = {"p": list(coeffs[0]), "ux": list(coeffs[1]),
                 "uy": list(coeffs[2])}
        for f, names in filters:
            use = named if not names else {k: named[k] for k in names}
            f(step, t, elements, use)

    rhs = lambda c, t: ape_rhs(state, c, t)
    final, t_end = run_time_loop(state.coeffs, rhs, dt, steps,
                                 observers=[snapshot] if filters else [])
    state.coeffs = final
    e1 = acoustic_energy(state)
    out = _field_paths(args.out)
    write_field(out, {"p": (elements, list(final[0])),
                      "ux": (elements, list(final[1])),
                      "uy": (elements, list(final[2]))},
                time=t_end, step=steps)
    report = {"steps": steps, "dt": dt, "final_time": t_end,
              "energy_initial": e0, "energy_final": e1}
    with open(os.path.join(args.out, "ape_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"Acoustic run: {steps} steps, energy {e0:.6e} -> {e1:.6e}")
    return 0


def cmd_partition(args):
    from .meshio import (build_dual_graph, extract_partition, partition,
                         partition_report, read_mesh, write_mesh)

    mesh = read_mesh(args.mesh)
    graph = build_dual_graph(mesh)
    parts = partition(graph, args.parts)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.parts):
        sub = extract_partition(mesh, parts, i)
        write_mesh(sub, os.path.join(args.out, f"part_{i}.nmj"))
    report = partition_report(graph, parts)
    report["assignment"] = parts.tolist()
    with open(os.path.join(args.out, "partition_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"Partitioned {graph.num_nodes} elements into {args.parts} parts; "
          f"edge cut {report['edge_cut']}, sizes {report['sizes']}")
    return 0


def cmd_bench_collections(args):
    from .collections import OperatorKind, autotune

    ses, elements = _load(args)
    _echo(ses, args.verbose)
    seed = int(os.environ.get("SPECHP_SEED", "0"))
    np.random.seed(seed)
    rows = []
    report = {}
    for op in (OperatorKind.BWD_TRANS, OperatorKind.IPRODUCT_WRT_BASE,
               OperatorKind.PHYS_DERIV):
        best, timings = autotune(elements, op, trials=args.trials,
                                 warmups=args.warmups)
        report[op.value] = {"chosen": best.value, "timings": timings}
        for strat, entry in timings.items():
            rows.append((op.value, strat, entry["median_s"],
                         "*" if strat == best.value else ""))
    width = max(len(r[0]) for r in rows)
    print(f"{'operator':<{width}}  {'strategy':<12} {'median_s':>12}  chosen")
    for op_name, strat, med, chosen in rows:
        print(f"{op_name:<{width}}  {strat:<12} {med:>12.3e}  {chosen}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_mesh_info(args):
    from .meshio import read_mesh

    mesh = read_mesh(args.mesh)
    print(f"verts={len(mesh.verts)} segs={len(mesh.segs)} "
          f"quads={len(mesh.quads)} tris={len(mesh.tris)}")
    print(f"composites={len(mesh.composites)} domain={len(mesh.domain)} "
          f"boundary_regions={len(mesh.boundary)}")
    for name in sorted(mesh.boundary):
        print(f"  boundary {name}: composites {mesh.boundary[name]}")
    return 0


def cmd_convert(args):
    from .fieldio import read_field, write_vtk
    from .meshio import read_mesh
    from .region import build_elements

    mesh = read_mesh(args.mesh)
    doc = read_field(args.field)
    names = sorted(doc["fields"])
    orders = {}
    per_field_coeffs = {}
    kind_of = {}
    for name in names:
        for row in doc["fields"][name]:
            orders[(row["kind"], row["id"])] = row["order"]
            kind_of[row["id"]] = row["kind"]
        per_field_coeffs[name] = {(row["kind"], row["id"]): row["coeffs"]
                                  for row in doc["fields"][name]}
    elements = build_elements(mesh, orders=orders)
    fields = {}
    for name in names:
        table = per_field_coeffs[name]
        fields[name] = [np.asarray(table[(el.kind, el.eid)], dtype=float)
                        for el in elements]
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    write_vtk(args.out, elements, fields, density=args.density)
    print(f"Wrote {args.out}")
    return 0


_COMMANDS = {
    "project": cmd_project,
    "solve-helmholtz": cmd_solve_helmholtz,
    "solve-advect": cmd_solve_advect,
    "solve-ape": cmd_solve_ape,
    "partition": cmd_partition,
    "bench-collections": cmd_bench_collections,
    "mesh-info": cmd_mesh_info,
    "convert": cmd_convert,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
