"""Conforming 2D triangulations with newest-vertex bisection.

Element vertex order is (v0, v1, v2) where v0 is the newest vertex and the
edge (v1, v2) opposite to it is the refinement edge.  Bisecting inserts the
midpoint m of (v1, v2) and produces the children (m, v0, v1) and (m, v2, v0),
which keeps positive orientation and assigns the children's refinement edges
to the two remaining old edges.

Meshes are immutable; every refinement returns a new mesh.  Vertices and
elements are only ever appended, so element order is stable for sequence
consumers.  Each element carries a lineage uid so refinement histories can be
tracked across meshes (stop sets, per-root source data).
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ValidationError

SUPPORTED_DOMAINS = ("unit_square", "l_shape", "z_shape")


@dataclass(frozen=True)
class DomainSpec:
    name: str

    def __post_init__(self):
        if self.name not in SUPPORTED_DOMAINS:
            raise ValidationError(f"unknown domain {self.name!r}")


@dataclass(frozen=True)
class Mesh:
    """Triangulation as flat arrays.

    vertices    (N, 2) float64
    triangles   (M, 3) int64, row = (v0, v1, v2), refinement edge (v1, v2)
    levels      (M,) bisection count relative to the root element
    uids        (M,) lineage-unique element ids
    parent_uids (M,) uid of the parent element, -1 for roots
    root_ids    (M,) index of the ancestor in the initial mesh
    """

    vertices: np.ndarray
    triangles: np.ndarray
    levels: np.ndarray
    uids: np.ndarray
    parent_uids: np.ndarray
    root_ids: np.ndarray
    generation: int = 0
    next_uid: int = field(default=-1)

    def __post_init__(self):
        for name in ("vertices", "triangles", "levels", "uids", "parent_uids", "root_ids"):
            getattr(self, name).flags.writeable = False
        if self.next_uid < 0:
            object.__setattr__(self, "next_uid", int(self.uids.max()) + 1 if len(self.uids) else 0)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    def element_coords(self, eid=None):
        """(M, 3, 2) corner coordinates, or (3, 2) for a single element."""
        if eid is None:
            return self.vertices[self.triangles]
        _check_eid(self, eid)
        return self.vertices[self.triangles[eid]]

    def boundary_edges(self):
        """Set of sorted vertex pairs that belong to exactly one element."""
        counts = _edge_counts(self.triangles)
        return {e for e, c in counts.items() if c == 1}

    def edge_to_elements(self):
        m = {}
        for i, (a, b, c) in enumerate(self.triangles):
            for e in ((b, c), (c, a), (a, b)):
                m.setdefault(_ekey(e[0], e[1]), []).append(i)
        return m


def _ekey(a, b):
    return (a, b) if a < b else (b, a)


def _edge_counts(tris):
    counts = {}
    for a, b, c in tris:
        for e in ((b, c), (c, a), (a, b)):
            k = _ekey(e[0], e[1])
            counts[k] = counts.get(k, 0) + 1
    return counts


def _check_eid(mesh, eid):
    if not (isinstance(eid, (int, np.integer)) and 0 <= eid < mesh.n_elements):
        raise ValidationError(f"element id {eid} out of range [0, {mesh.n_elements})")


def signed_area(p0, p1, p2):
    return 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))


def _mesh_from_lists(verts, tris, levels, uids, parents, roots, generation, next_uid):
    return Mesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 2),
        triangles=np.asarray(tris, dtype=np.int64).reshape(-1, 3),
        levels=np.asarray(levels, dtype=np.int64),
        uids=np.asarray(uids, dtype=np.int64),
        parent_uids=np.asarray(parents, dtype=np.int64),
        root_ids=np.asarray(roots, dtype=np.int64),
        generation=generation,
        next_uid=next_uid,
    )


# ---------------------------------------------------------------------------
# initial meshes


def make_initial_mesh(spec):
    """Coarse compatible triangulation of one of the supported domains."""
    if isinstance(spec, str):
        spec = DomainSpec(spec)
    if spec.name == "unit_square":
        verts = [(0, 0), (1, 0), (1, 1), (0, 1)]
        tris = [(1, 2, 0), (3, 0, 2)]
    elif spec.name == "l_shape":
        # [-1,1]^2 minus the quadrant x>0, y<0; diagonals meet the re-entrant corner
        verts = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1)]
        tris = [(1, 2, 0), (3, 0, 2), (3, 4, 0), (5, 0, 4), (5, 6, 0), (7, 0, 6)]
    elif spec.name == "z_shape":
        # [-1,1]^2 minus the slit triangle conv{(0,0), (-1,0), (-1,-1/5)}
        verts = [
            (0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1),
            (1, 0), (1, -1), (0, -1), (-1, -1), (-1, -0.2),
        ]
        tris = [
            (1, 0, 2), (3, 2, 0), (3, 0, 4), (5, 4, 0),
            (5, 0, 6), (7, 6, 0), (7, 0, 8), (9, 8, 0),
        ]
    else:  # pragma: no cover - DomainSpec already validated
        raise ValidationError(spec.name)

    verts = np.asarray(verts, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    for i, (a, b, c) in enumerate(tris):
        if signed_area(verts[a], verts[b], verts[c]) <= 0:
            raise GeometryError(f"element {i} not positively oriented")
    _check_compatible_assignment(verts, tris)
    m = len(tris)
    return _mesh_from_lists(
        verts, tris, [0] * m, list(range(m)), [-1] * m, list(range(m)), 0, m
    )


def _check_compatible_assignment(verts, tris):
    # every interior refinement edge must be the refinement edge of both sides
    ref_edges = {}
    counts = _edge_counts(tris)
    for i, (v0, v1, v2) in enumerate(tris):
        k = _ekey(v1, v2)
        ref_edges.setdefault(k, []).append(i)
    for k, owners in ref_edges.items():
        if counts[k] == 2 and len(owners) != 2:
            raise GeometryError(f"refinement edge {k} not mutually assigned")


# ---------------------------------------------------------------------------
# refinement


class _Refiner:
    """Mutable scratch structure for one refinement call."""

    def __init__(self, mesh):
        self.verts = [tuple(p) for p in mesh.vertices]
        self.tris = [tuple(t) for t in mesh.triangles]
        self.levels = list(mesh.levels)
        self.uids = list(mesh.uids)
        self.parents = list(mesh.parent_uids)
        self.roots = list(mesh.root_ids)
        self.alive = [True] * len(self.tris)
        self.next_uid = mesh.next_uid
        self.edge_mid = {}
        self.edge_elems = mesh.edge_to_elements()
        self.n_bisections = 0

    def _midpoint(self, a, b):
        k = _ekey(a, b)
        m = self.edge_mid.get(k)
        if m is None:
            pa, pb = self.verts[a], self.verts[b]
            self.verts.append(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0))
            m = len(self.verts) - 1
            self.edge_mid[k] = m
        return m

    def _attach(self, i):
        a, b, c = self.tris[i]
        for e in ((b, c), (c, a), (a, b)):
            self.edge_elems.setdefault(_ekey(e[0], e[1]), []).append(i)

    def _detach(self, i):
        a, b, c = self.tris[i]
        for e in ((b, c), (c, a), (a, b)):
            k = _ekey(e[0], e[1])
            lst = self.edge_elems.get(k)
            if lst is not None and i in lst:
                lst.remove(i)

    def bisect(self, i):
        """Split element i along its refinement edge; returns child indices."""
        v0, v1, v2 = self.tris[i]
        m = self._midpoint(v1, v2)
        self._detach(i)
        self.alive[i] = False
        children = []
        for tri in ((m, v0, v1), (m, v2, v0)):
            self.tris.append(tri)
            self.levels.append(self.levels[i] + 1)
            self.uids.append(self.next_uid)
            self.next_uid += 1
            self.parents.append(self.uids[i])
            self.roots.append(self.roots[i])
            self.alive.append(True)
            j = len(self.tris) - 1
            self._attach(j)
            children.append(j)
        self.n_bisections += 1
        return children, _ekey(v1, v2)

    def hanging(self, i):
        a, b, c = self.tris[i]
        for e in ((b, c), (c, a), (a, b)):
            if _ekey(e[0], e[1]) in self.edge_mid:
                return True
        return False

    def close(self, seeds, cap):
        """Bisect until no alive element has a split edge."""
        queue = deque(seeds)
        while queue:
            i = queue.popleft()
            if not self.alive[i] or not self.hanging(i):
                continue
            children, split_edge = self.bisect(i)
            if self.n_bisections > cap:
                raise RuntimeError("mesh closure did not terminate (incompatible refinement edges?)")
            queue.extend(children)
            queue.extend(self.edge_elems.get(split_edge, ()))

    def finish(self, generation):
        order = [i for i, a in enumerate(self.alive) if a]
        tris = [self.tris[i] for i in order]
        return _mesh_from_lists(
            self.verts,
            tris,
            [self.levels[i] for i in order],
            [self.uids[i] for i in order],
            [self.parents[i] for i in order],
            [self.roots[i] for i in order],
            generation,
            self.next_uid,
        )


def refine_nvb(mesh, marked):
    """Bisect at least the marked elements, then close the mesh.

    Unmarked, unforced elements are carried over unchanged and keep their
    relative order; new elements are appended in creation order.
    """
    marked = sorted(set(int(i) for i in marked))
    for i in marked:
        _check_eid(mesh, i)
    if not marked:
        return mesh
    r = _Refiner(mesh)
    cap = 64 * (mesh.n_elements + len(marked)) + 65536
    seeds = []
    for i in marked:
        if not r.alive[i]:
            continue
        children, split_edge = r.bisect(i)
        seeds.extend(children)
        seeds.extend(r.edge_elems.get(split_edge, ()))
    r.close(seeds, cap)
    return r.finish(mesh.generation + 1)


def bisect_element(mesh, eid):
    """Single bisection without mesh closure (nonconforming output allowed)."""
    _check_eid(mesh, eid)
    r = _Refiner(mesh)
    r.bisect(int(eid))
    return r.finish(mesh.generation + 1)


def uniform_refine(mesh):
    """Bisect every element twice; each triangle is replaced by 4 children.

    Equivalent to marking everything in refine_nvb and iterating until every
    input element has been bisected twice: all edge midpoints are used, so the
    result is conforming without extra closure.
    """
    r = _Refiner(mesh)
    for i in range(mesh.n_elements):
        children, _ = r.bisect(i)
        for c in children:
            r.bisect(c)
    out = r.finish(mesh.generation + 1)
    assert out.n_elements == 4 * mesh.n_elements
    return out


# ---------------------------------------------------------------------------
# queries


def element_patch(mesh, eid):
    """eid plus its edge neighbors (face patch of the element)."""
    _check_eid(mesh, eid)
    e2e = mesh.edge_to_elements()
    a, b, c = mesh.triangles[eid]
    out = [int(eid)]
    for e in ((b, c), (c, a), (a, b)):
        for j in e2e[_ekey(e[0], e[1])]:
            if j != eid and j not in out:
                out.append(int(j))
    return out


def edge_neighbors(mesh, eid):
    """Neighbor across each local edge (opposite v0, v1, v2); -1 on boundary."""
    _check_eid(mesh, eid)
    e2e = mesh.edge_to_elements()
    a, b, c = mesh.triangles[eid]
    out = []
    for e in ((b, c), (c, a), (a, b)):
        nb = [j for j in e2e[_ekey(e[0], e[1])] if j != eid]
        out.append(int(nb[0]) if nb else -1)
    return out


def element_geometry(mesh, eid):
    """(area, diam_inf, perimeter, coords) of one element."""
    _check_eid(mesh, eid)
    p = mesh.vertices[mesh.triangles[eid]]
    area = abs(signed_area(p[0], p[1], p[2]))
    diam_inf = 0.0
    perimeter = 0.0
    for i, j in ((0, 1), (1, 2), (2, 0)):
        d = p[i] - p[j]
        diam_inf = max(diam_inf, max(abs(d[0]), abs(d[1])))
        perimeter += float(np.hypot(d[0], d[1]))
    return float(area), float(diam_inf), perimeter, p.copy()


def areas(mesh):
    p = mesh.element_coords()
    return 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )


def min_angle(mesh):
    """Smallest interior angle over all elements (radians)."""
    p = mesh.element_coords()
    worst = np.pi
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        worst = min(worst, float(np.arccos(np.clip(cosang, -1, 1)).min()))
    return worst


def check_conformity(mesh):
    """Raise GeometryError if the mesh is not a conforming triangulation."""
    tris = mesh.triangles
    if len(tris) == 0:
        raise GeometryError("empty mesh")
    for i, (a, b, c) in enumerate(tris):
        if len({a, b, c}) != 3:
            raise GeometryError(f"element {i} has repeated vertices")
        if signed_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) <= 0:
            raise GeometryError(f"element {i} degenerate or negatively oriented")
    counts = _edge_counts(tris)
    bad = [e for e, c in counts.items() if c > 2]
    if bad:
        raise GeometryError(f"edges shared by more than two elements: {bad[:4]}")
    # hanging nodes: an edge seen once whose midpoint is an existing vertex
    coord_index = {(float(x), float(y)) for x, y in mesh.vertices}
    for (a, b), c in counts.items():
        if c != 1:
            continue
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        mid = ((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0)
        if mid in coord_index:
            # only a violation if some element actually uses the midpoint
            raise GeometryError(f"hanging node on edge ({a}, {b})")
    return True


def is_refinement_of(fine, coarse, tol=1e-12):
    """True if every element of `fine` lies inside some element of `coarse`.

    Valid refinement test inside one NVB family, where elements either nest
    or have disjoint interiors.
    """
    coarse_coords = coarse.element_coords()
    fine_coords = fine.element_coords()
    for t in range(fine.n_elements):
        bary = fine_coords[t].mean(axis=0)
        host = _locate(coarse_coords, bary, tol)
        if host is None:
            return False
        hc = coarse_coords[host]
        for corner in fine_coords[t]:
            if not _point_in_tri(hc, corner, tol):
                return False
    return True


def _locate(coords, point, tol):
    for i in range(coords.shape[0]):
        if _point_in_tri(coords[i], point, tol):
            return i
    return None


def _point_in_tri(tri, p, tol):
    a = signed_area(tri[0], tri[1], tri[2])
    for i in range(3):
        s = signed_area(tri[i], tri[(i + 1) % 3], p)
        if s < -tol * max(a, 1.0):
            return False
    return True


# ---------------------------------------------------------------------------
# serialization


def mesh_to_text(mesh):
    lines = [f"vertices {mesh.n_vertices} elements {mesh.n_elements}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for (a, b, c), lev in zip(mesh.triangles, mesh.levels):
        lines.append(f"{a} {b} {c} {lev}")
    return "\n".join(lines) + "\n"


def mesh_from_text(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "vertices" or head[2] != "elements":
        raise ValidationError(f"bad mesh header: {lines[0]!r}")
    n, m = int(head[1]), int(head[3])
    if len(lines) != 1 + n + m:
        raise ValidationError("mesh text has wrong number of lines")
    verts = [tuple(float(t) for t in ln.split()) for ln in lines[1 : 1 + n]]
    tris, levels = [], []
    for ln in lines[1 + n :]:
        a, b, c, lev = (int(t) for t in ln.split())
        tris.append((a, b, c))
        levels.append(lev)
    return _mesh_from_lists(
        verts, tris, levels, list(range(m)), [-1] * m, list(range(m)), 0, m
    )


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(mesh_to_text(mesh))


def load_mesh(path):
    with open(path) as fh:
        return mesh_from_text(fh.read())
