"""Per-element bundles tying mesh topology, geometry and expansions together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ElementGeom, GeomFactors, geom_factors
from .stdregions import Shape, StdExpansion, make_quad, make_tri


@dataclass
class Element:
    kind: str                 # "quad" | "tri"
    eid: int
    order: int
    exp: StdExpansion
    geom: ElementGeom
    gf: GeomFactors
    vert_ids: list            # mesh vertex ids in local order
    edge_segs: list           # mesh segment id per local edge
    edge_forward: list        # True if segment direction matches mode axis

    @property
    def num_modes(self):
        return self.exp.num_modes

    @property
    def num_points(self):
        return self.exp.num_points


def _element_order(orders, kind, eid, default):
    if orders is None:
        return default
    if isinstance(orders, int):
        return orders
    return orders.get((kind, eid), orders.get(eid, default))


_exp_cache = {}


def shared_expansion(kind, P, num_points=None):
    """Expansions are immutable, so same-signature elements share one."""
    key = (kind, P, num_points)
    if key not in _exp_cache:
        _exp_cache[key] = (make_quad(P, num_points=num_points) if kind == "quad"
                           else make_tri(P, num_points=num_points))
    return _exp_cache[key]


def build_elements(mesh, orders=3, num_points=None):
    """Construct Element bundles for every domain element of a mesh.

    `orders` is a scalar or a {(kind, id): P} / {id: P} table; `num_points`
    optionally overrides the default one-point-more-than-modes rule.
    """
    out = []
    for kind, eid in mesh.elements():
        P = _element_order(orders, kind, eid, 3)
        shape = Shape.QUAD if kind == "quad" else Shape.TRI
        exp = shared_expansion(kind, P, num_points)
        loop = mesh.local_vertices(kind, eid)
        verts = np.array([mesh.verts[v][:2] for v in loop])
        edge_segs = list(mesh.face_edges(kind, eid))
        forward, curves = [], {}
        for le, sid in enumerate(edge_segs):
            ends = exp.edge_modes[le]["ends"]
            axis_start = loop[ends[0]]
            fwd = mesh.segs[sid][0] == axis_start
            forward.append(fwd)
            if sid in mesh.curves:
                nodes = np.array([p[:2] for p in mesh.curves[sid]])
                curves[le] = nodes if fwd else nodes[::-1]
        geom = ElementGeom(shape, verts, curves, elem_id=eid)
        gf = geom_factors(geom, exp)
        out.append(Element(kind, eid, P, exp, geom, gf, loop, edge_segs,
                           forward))
    return out
