"""Field snapshots (NFJ v1 JSON) and legacy-VTK ASCII export.

NFJ v1 stores per-variable, per-element coefficient arrays together with
the expansion metadata (shape, order, basis types) needed to rebuild or
post-process the field.  The VTK path samples each element on an
equispaced lattice and emits an unstructured grid of linear cells.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .basis import duffy_collapse
from .geometry import x_map
from .stdregions import Shape, bwd_trans


class FieldIOError(ValueError):
    pass


def field_document(fields, time=0.0, step=0):
    """fields: {name: (elements, coeffs_list)}."""
    doc = {"version": 1, "time": float(time), "step": int(step), "fields": {}}
    for name, (elements, coeffs) in fields.items():
        rows = []
        for el, c in zip(elements, coeffs):
            rows.append({
                "id": int(el.eid),
                "kind": el.kind,
                "order": int(el.order),
                "basis": [k.basis_type.value for k in el.exp.basis_keys],
                "points": [k.points_key.num_points for k in el.exp.basis_keys],
                "coeffs": [float(v) for v in c],
            })
        doc["fields"][name] = rows
    return doc


def write_field(path, fields, time=0.0, step=0):
    doc = field_document(fields, time, step)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_field(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise FieldIOError(f"{path}: unsupported snapshot version")
    return doc


def _lattice(shape: Shape, density):
    """Equispaced reference lattice and linear sub-cells for visualisation."""
    n = max(2, density)
    s = np.linspace(-1.0, 1.0, n)
    if shape is Shape.QUAD:
        g1, g2 = np.meshgrid(s, s, indexing="ij")
        pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
        cells = []
        for i in range(n - 1):
            for j in range(n - 1):
                a = i * n + j
                cells.append((4, [a, a + n, a + n + 1, a + 1]))
        return pts, cells, 9        # VTK_QUAD
    # triangle: lattice rows of shrinking length in barycentric layout
    pts, index = [], {}
    for i in range(n):
        for j in range(n - i):
            index[(i, j)] = len(pts)
            pts.append((-1.0 + 2.0 * i / (n - 1), -1.0 + 2.0 * j / (n - 1)))
    cells = []
    for i in range(n - 1):
        for j in range(n - 1 - i):
            a, b, c = index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]
            cells.append((3, [a, b, c]))
            if j < n - 2 - i:
                d = index[(i + 1, j + 1)]
                cells.append((3, [b, d, c]))
    return np.array(pts), cells, 5   # VTK_TRIANGLE


def write_vtk(path, elements, fields, density=None):
    """Legacy-VTK ASCII export of modal fields sampled on a per-element
    equispaced lattice.  fields: {name: coeffs_list}."""
    points, cells, cell_types = [], [], []
    values = {name: [] for name in fields}
    for e_idx, el in enumerate(elements):
        dens = density or (el.order + 2)
        ref, local_cells, ctype = _lattice(el.exp.shape, dens)
        base = len(points)
        world = x_map(el.geom, ref)
        world = np.atleast_2d(world)
        points.extend(world.tolist())
        table = el.exp.eval_basis_at(ref)
        for name, coeffs in fields.items():
            values[name].extend((np.asarray(coeffs[e_idx]) @ table).tolist())
        for sz, conn in local_cells:
            cells.append((sz, [base + k for k in conn]))
            cell_types.append(ctype)

    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("spechp field export\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points)} double\n")
        for x, y in points:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        total = sum(1 + sz for sz, _ in cells)
        fh.write(f"CELLS {len(cells)} {total}\n")
        for sz, conn in cells:
            fh.write(" ".join([str(sz)] + [str(k) for k in conn]) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        for t in cell_types:
            fh.write(f"{t}\n")
        fh.write(f"POINT_DATA {len(points)}\n")
        for name, vals in values.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in vals:
                fh.write(f"{v:.12g}\n")


def snapshot_basename(prefix, step):
    return f"{prefix}_{step:06d}"


def ensure_writable_dir(path):
    probe = os.path.join(path, ".write_probe")
    try:
        os.makedirs(path, exist_ok=True)
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise FieldIOError(f"output path {path!r} is not writable: {exc}")
