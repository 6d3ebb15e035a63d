"""Hierarchical mesh container (NMJ v1), dual graph, and partitioning.

NMJ v1 is a single JSON document: datasets under "mesh" hold the entity
definitions (vertices as coordinates, segments as vertex pairs, faces as
edge lists) and "maps" holds the integer ID of each dataset row.  Curves,
composites, the domain composite list and named boundary regions complete
the container.  The canonical serialisation is key-sorted, id-sorted,
LF-terminated, with coordinates printed to 17 significant digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class MeshGraph:
    verts: dict = field(default_factory=dict)       # id -> (x, y, z)
    segs: dict = field(default_factory=dict)        # id -> (v0, v1)
    tris: dict = field(default_factory=dict)        # id -> (e0, e1, e2)
    quads: dict = field(default_factory=dict)       # id -> (e0, e1, e2, e3)
    curves: dict = field(default_factory=dict)      # seg id -> [(x, y, z), ...]
    composites: dict = field(default_factory=dict)  # id -> (kind, [ids])
    domain: list = field(default_factory=list)      # composite ids
    boundary: dict = field(default_factory=dict)    # name -> [composite ids]

    def elements(self):
        """Domain elements as (kind, id) pairs, in domain/composite order."""
        out = []
        for cid in self.domain:
            kind, ids = self.composites[cid]
            out.extend((kind, i) for i in ids)
        return out

    def face_edges(self, kind, eid):
        return self.tris[eid] if kind == "tri" else self.quads[eid]

    def face_vertex_loop(self, kind, eid):
        """Ordered vertex ids of a face; consecutive edges must chain."""
        edges = self.face_edges(kind, eid)
        pairs = [self.segs[e] for e in edges]
        loop = []
        for i, (a, b) in enumerate(pairs):
            nxt = set(pairs[(i + 1) % len(pairs)])
            if b in nxt:
                loop.append(a)
            elif a in nxt:
                loop.append(b)
            else:
                raise MeshError(f"{kind} {eid}: edges do not form a closed loop")
        return loop

    def local_vertices(self, kind, eid):
        """Vertex ids in local element order (V0, V1, V2[, V3]).

        V0 is the first vertex of edge 0's traversal within the loop."""
        return self.face_vertex_loop(kind, eid)


def validate_mesh(mesh: MeshGraph):
    for sid, (a, b) in mesh.segs.items():
        for v in (a, b):
            if v not in mesh.verts:
                raise MeshError(f"segment {sid} references missing vert {v}")
        if a == b:
            raise MeshError(f"segment {sid} is degenerate")
    for kind, table in (("tri", mesh.tris), ("quad", mesh.quads)):
        for fid, edges in table.items():
            for e in edges:
                if e not in mesh.segs:
                    raise MeshError(f"{kind} {fid} references missing seg {e}")
            mesh.face_vertex_loop(kind, fid)
    for sid in mesh.curves:
        if sid not in mesh.segs:
            raise MeshError(f"curve references missing seg {sid}")
    for cid, (kind, ids) in mesh.composites.items():
        table = {"seg": mesh.segs, "tri": mesh.tris, "quad": mesh.quads}[kind]
        for i in ids:
            if i not in table:
                raise MeshError(f"composite {cid} references missing {kind} {i}")
    if not mesh.domain:
        raise MeshError("empty domain list")
    for cid in mesh.domain:
        if cid not in mesh.composites:
            raise MeshError(f"domain references missing composite {cid}")
        if mesh.composites[cid][0] == "seg":
            raise MeshError(f"domain composite {cid} must hold faces")
    for name, cids in mesh.boundary.items():
        for cid in cids:
            if cid not in mesh.composites:
                raise MeshError(
                    f"boundary region {name!r} references missing composite {cid}")
    return mesh


# -- serialisation -------------------------------------------------------------


def _fmt(value):
    if isinstance(value, bool):
        raise MeshError("booleans are not part of the schema")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if v == 0.0:
            v = 0.0    # normalise -0.0 so canonical text round-trips
        return format(v, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        items = sorted(value.items(), key=lambda kv: str(kv[0]))
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in items) + "}"
    raise MeshError(f"cannot serialise {type(value)}")


def mesh_to_document(mesh: MeshGraph):
    def dataset(table, row):
        ids = sorted(table)
        return [row(table[i]) for i in ids], ids

    mesh_group, maps_group = {}, {}
    mesh_group["vert"], maps_group["vert"] = dataset(
        mesh.verts, lambda v: [float(c) for c in v])
    mesh_group["seg"], maps_group["seg"] = dataset(
        mesh.segs, lambda s: [int(x) for x in s])
    mesh_group["tri"], maps_group["tri"] = dataset(
        mesh.tris, lambda t: [int(x) for x in t])
    mesh_group["quad"], maps_group["quad"] = dataset(
        mesh.quads, lambda q: [int(x) for x in q])
    doc = {
        "version": 1,
        "mesh": mesh_group,
        "maps": maps_group,
        "curves": {"seg": [
            {"id": int(sid), "points": [[float(c) for c in p]
                                        for p in mesh.curves[sid]]}
            for sid in sorted(mesh.curves)]},
        "composites": {
            str(cid): {"kind": kind, "ids": sorted(int(i) for i in ids)}
            for cid, (kind, ids) in mesh.composites.items()},
        "domain": sorted(int(c) for c in mesh.domain),
        "boundary": {name: sorted(int(c) for c in cids)
                     for name, cids in mesh.boundary.items()},
    }
    return doc


def canonical_dumps(doc):
    return _fmt(doc) + "\n"


def write_mesh(mesh: MeshGraph, path):
    validate_mesh(mesh)
    text = canonical_dumps(mesh_to_document(mesh))
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


def _expect(cond, path, message):
    if not cond:
        raise MeshError(f"{path}: {message}")


def document_to_mesh(doc) -> MeshGraph:
    _expect(isinstance(doc, dict), "$", "top level must be an object")
    _expect(doc.get("version") == 1, "$.version", "unsupported version")
    mesh_group = doc.get("mesh")
    maps_group = doc.get("maps")
    _expect(isinstance(mesh_group, dict), "$.mesh", "missing mesh group")
    _expect(isinstance(maps_group, dict), "$.maps", "missing maps group")

    def read(kind, width):
        rows = mesh_group.get(kind, [])
        ids = maps_group.get(kind, [])
        _expect(isinstance(rows, list), f"$.mesh.{kind}", "must be a list")
        _expect(len(rows) == len(ids),
                f"$.maps.{kind}", "row count differs from id count")
        out = {}
        for n, (i, row) in enumerate(zip(ids, rows)):
            _expect(isinstance(row, list) and len(row) == width,
                    f"$.mesh.{kind}[{n}]", f"row must have {width} entries")
            _expect(i not in out, f"$.maps.{kind}[{n}]", f"duplicate id {i}")
            out[int(i)] = tuple(row)
        return out

    mesh = MeshGraph()
    mesh.verts = {i: tuple(float(c) for c in row)
                  for i, row in read("vert", 3).items()}
    mesh.segs = {i: tuple(int(v) for v in row)
                 for i, row in read("seg", 2).items()}
    mesh.tris = {i: tuple(int(v) for v in row)
                 for i, row in read("tri", 3).items()}
    mesh.quads = {i: tuple(int(v) for v in row)
                  for i, row in read("quad", 4).items()}

    for n, item in enumerate(doc.get("curves", {}).get("seg", [])):
        _expect(isinstance(item, dict) and "id" in item and "points" in item,
                f"$.curves.seg[{n}]", "curve must carry id and points")
        mesh.curves[int(item["id"])] = [tuple(float(c) for c in p)
                                        for p in item["points"]]
    for cid, spec in doc.get("composites", {}).items():
        _expect(isinstance(spec, dict) and spec.get("kind") in ("seg", "tri", "quad"),
                f"$.composites.{cid}", "kind must be seg, tri or quad")
        mesh.composites[int(cid)] = (spec["kind"], [int(i) for i in spec["ids"]])
    mesh.domain = [int(c) for c in doc.get("domain", [])]
    mesh.boundary = {str(name): [int(c) for c in cids]
                     for name, cids in doc.get("boundary", {}).items()}
    return validate_mesh(mesh)


def read_mesh(path) -> MeshGraph:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MeshError(f"{path}: not valid JSON: {exc}") from exc
    return document_to_mesh(doc)


# -- dual graph and partitioning -----------------------------------------------


@dataclass
class DualGraph:
    nodes: list                  # (kind, id) per element
    adjacency: list              # list of sorted neighbour-index lists
    edges: list                  # (a, b) with a < b

    @property
    def num_nodes(self):
        return len(self.nodes)


def build_dual_graph(mesh: MeshGraph) -> DualGraph:
    """One node per domain element; an edge wherever two elements share a
    segment id."""
    nodes = mesh.elements()
    by_seg = {}
    for idx, (kind, eid) in enumerate(nodes):
        for e in mesh.face_edges(kind, eid):
            by_seg.setdefault(e, []).append(idx)
    edge_set = set()
    for members in by_seg.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                a, b = sorted((members[i], members[j]))
                if a != b:
                    edge_set.add((a, b))
    adjacency = [[] for _ in nodes]
    for a, b in edge_set:
        adjacency[a].append(b)
        adjacency[b].append(a)
    for lst in adjacency:
        lst.sort()
    return DualGraph(nodes, adjacency, sorted(edge_set))


def _bfs_order(adjacency, seed, allowed):
    from collections import deque

    seen = {seed}
    order = [seed]
    queue = deque([seed])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if v in allowed and v not in seen:
                seen.add(v)
                order.append(v)
                queue.append(v)
    return order


def _pseudo_peripheral(adjacency, allowed):
    """Start from the lowest remaining node, walk to the farthest node."""
    seed = min(allowed)
    for _ in range(2):
        order = _bfs_order(adjacency, seed, allowed)
        seed = order[-1]
    return seed


def partition(graph: DualGraph, k: int):
    """Greedy graph-growing partition into k parts of near-equal size.

    Each part is grown breadth-first from a pseudo-peripheral seed of the
    remaining subgraph; part i receives ceil(remaining / remaining_parts)
    elements, which keeps every part within ceil(n/k).
    """
    n = graph.num_nodes
    if not (1 <= k <= n):
        raise MeshError(f"part count {k} outside [1, {n}]")
    parts = np.full(n, -1, dtype=int)
    remaining = set(range(n))
    for part in range(k):
        target = -(-len(remaining) // (k - part))    # ceil division
        taken = []
        while len(taken) < target:
            seed = _pseudo_peripheral(graph.adjacency, remaining)
            order = _bfs_order(graph.adjacency, seed, remaining)
            grab = order[:target - len(taken)]
            taken.extend(grab)
            remaining.difference_update(grab)
        parts[taken] = part
    return parts


def edge_cut(graph: DualGraph, parts):
    return int(sum(1 for a, b in graph.edges if parts[a] != parts[b]))


def partition_report(graph: DualGraph, parts):
    k = int(parts.max()) + 1
    sizes = [int(np.sum(parts == p)) for p in range(k)]
    # ghost annotations: which parts each part touches across cut edges
    neighbours = {p: set() for p in range(k)}
    for a, b in graph.edges:
        if parts[a] != parts[b]:
            neighbours[int(parts[a])].add(int(parts[b]))
            neighbours[int(parts[b])].add(int(parts[a]))
    return {"num_parts": k, "sizes": sizes,
            "edge_cut": edge_cut(graph, parts),
            "ghost_neighbours": {str(p): sorted(n)
                                 for p, n in neighbours.items()}}


def extract_partition(mesh: MeshGraph, parts, index) -> MeshGraph:
    """Sub-mesh holding part `index` elements plus their closure."""
    nodes = mesh.elements()
    mine = [nodes[i] for i in range(len(nodes)) if parts[i] == index]
    if not mine:
        raise MeshError(f"partition {index} is empty")
    keep_faces = set(mine)
    keep_segs, keep_verts = set(), set()
    sub = MeshGraph()
    for kind, eid in mine:
        edges = mesh.face_edges(kind, eid)
        keep_segs.update(edges)
        if kind == "tri":
            sub.tris[eid] = mesh.tris[eid]
        else:
            sub.quads[eid] = mesh.quads[eid]
    for sid in keep_segs:
        sub.segs[sid] = mesh.segs[sid]
        keep_verts.update(mesh.segs[sid])
        if sid in mesh.curves:
            sub.curves[sid] = mesh.curves[sid]
    for vid in keep_verts:
        sub.verts[vid] = mesh.verts[vid]
    for cid, (kind, ids) in mesh.composites.items():
        if kind == "seg":
            kept = [i for i in ids if i in keep_segs]
        else:
            kept = [i for i in ids if (kind, i) in keep_faces]
        if kept:
            sub.composites[cid] = (kind, kept)
    sub.domain = [c for c in mesh.domain if c in sub.composites]
    sub.boundary = {name: [c for c in cids if c in sub.composites]
                    for name, cids in mesh.boundary.items()}
    sub.boundary = {n: c for n, c in sub.boundary.items() if c}
    return validate_mesh(sub)


# -- structured generators (test/demo plumbing) ---------------------------------


def structured_quad_mesh(nx, ny, x0=0.0, y0=0.0, x1=1.0, y1=1.0):
    """nx-by-ny quadrilateral grid with named boundary composites
    (south/east/north/west) and the domain in composite 0."""
    mesh = MeshGraph()
    vid = lambda i, j: j * (nx + 1) + i
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    for j in range(ny + 1):
        for i in range(nx + 1):
            mesh.verts[vid(i, j)] = (float(xs[i]), float(ys[j]), 0.0)
    hseg = {}
    vseg = {}
    sid = 0
    for j in range(ny + 1):
        for i in range(nx):
            hseg[i, j] = sid
            mesh.segs[sid] = (vid(i, j), vid(i + 1, j))
            sid += 1
    for j in range(ny):
        for i in range(nx + 1):
            vseg[i, j] = sid
            mesh.segs[sid] = (vid(i, j), vid(i, j + 1))
            sid += 1
    qid = 0
    for j in range(ny):
        for i in range(nx):
            mesh.quads[qid] = (hseg[i, j], vseg[i + 1, j], hseg[i, j + 1],
                               vseg[i, j])
            qid += 1
    mesh.composites[0] = ("quad", list(range(qid)))
    mesh.composites[1] = ("seg", [hseg[i, 0] for i in range(nx)])
    mesh.composites[2] = ("seg", [vseg[nx, j] for j in range(ny)])
    mesh.composites[3] = ("seg", [hseg[i, ny] for i in range(nx)])
    mesh.composites[4] = ("seg", [vseg[0, j] for j in range(ny)])
    mesh.domain = [0]
    mesh.boundary = {"south": [1], "east": [2], "north": [3], "west": [4]}
    return validate_mesh(mesh)


def single_quad_mesh(verts=None):
    """The minimal container example: 4 vertices, 4 segments, 1 quad."""
    mesh = MeshGraph()
    verts = verts if verts is not None else [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    for i, (x, y) in enumerate(verts):
        mesh.verts[i] = (float(x), float(y), 0.0)
    mesh.segs = {0: (0, 1), 1: (1, 2), 2: (3, 2), 3: (0, 3)}
    mesh.quads = {0: (0, 1, 2, 3)}
    mesh.composites = {0: ("quad", [0]), 1: ("seg", [0, 1, 2, 3])}
    mesh.domain = [0]
    mesh.boundary = {"wall": [1]}
    return validate_mesh(mesh)


def structured_tri_mesh(nx, ny, x0=0.0, y0=0.0, x1=1.0, y1=1.0):
    """Quad grid split into lower-left/upper-right triangle pairs."""
    base = structured_quad_mesh(nx, ny, x0, y0, x1, y1)
    mesh = MeshGraph()
    mesh.verts = dict(base.verts)
    mesh.segs = dict(base.segs)
    sid = max(mesh.segs) + 1
    tid = 0
    for qid in sorted(base.quads):
        e0, e1, e2, e3 = base.quads[qid]
        loop = base.face_vertex_loop("quad", qid)
        diag = sid
        mesh.segs[diag] = (loop[1], loop[3])
        sid += 1
        mesh.tris[tid] = (e0, diag, e3)
        mesh.tris[tid + 1] = (e2, diag, e1)
        tid += 2
    mesh.composites[0] = ("tri", list(range(tid)))
    for cid in (1, 2, 3, 4):
        mesh.composites[cid] = base.composites[cid]
    mesh.domain = [0]
    mesh.boundary = dict(base.boundary)
    return validate_mesh(mesh)
