"""Conforming 2D triangulations with newest-vertex bisection (NVB).

Conventions
-----------
* Triangles are stored counterclockwise.  The reference edge of a
  triangle ``(v0, v1, v2)`` is the edge ``(v0, v1)``; ``v2`` is the
  newest vertex.  Bisecting inserts the midpoint ``m`` of ``(v0, v1)``
  and produces the children ``(v2, v0, m)`` and ``(v1, v2, m)`` (both
  counterclockwise, reference edges = the two remaining parent edges).
* All meshes derived from one root share a :class:`RefinementForest`
  which registers every vertex and element ever created, so vertex and
  element ids are stable across the whole refinement family.  This makes
  nestedness queries (ancestor lookup, edge splitting) exact integer
  arithmetic instead of geometry searches.
* Meshes are immutable values: refinement returns a new
  :class:`Triangulation`, queries never mutate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RefinementForest",
    "Triangulation",
    "GradingConfig",
    "MeshHierarchy",
    "root_mesh",
    "nvb_refine",
    "enforce_grading",
    "grading_ok",
    "uniform_hierarchy",
    "patch",
    "element_level",
    "save_mesh",
    "load_mesh",
    "square_root",
    "lshape_root",
    "slit_root",
]


@dataclass(frozen=True)
class GradingConfig:
    """Patch-depth parameter of the level-grading condition."""

    d_grad: int = 4

    def __post_init__(self):
        if self.d_grad < 1:
            raise ValueError("d_grad must be >= 1")


class RefinementForest:
    """Registry of every vertex/element of one NVB refinement family."""

    def __init__(self, coords, triangles):
        self.coords = [tuple(map(float, p)) for p in coords]
        # first NVB level at which each vertex appears (0 for root vertices)
        self.vert_level = [0] * len(self.coords)
        self.elem_verts = []
        self.elem_level = []
        self.elem_parent = []
        self._mid = {}
        self._children = {}
        for t in triangles:
            self.elem_verts.append(tuple(int(v) for v in t))
            self.elem_level.append(0)
            self.elem_parent.append(-1)
        self.n_roots = len(self.elem_verts)

    def midpoint(self, a, b, level=None):
        key = (a, b) if a < b else (b, a)
        m = self._mid.get(key)
        if m is None:
            pa, pb = self.coords[a], self.coords[b]
            m = len(self.coords)
            self.coords.append((0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])))
            self.vert_level.append(
                level if level is not None else
                max(self.vert_level[a], self.vert_level[b]) + 1
            )
            self._mid[key] = m
        elif level is not None and level < self.vert_level[m]:
            self.vert_level[m] = level
        return m

    def edge_midpoint_id(self, a, b):
        """Midpoint vertex id of edge (a,b) if it was ever created, else None."""
        key = (a, b) if a < b else (b, a)
        return self._mid.get(key)

    def bisect(self, eid):
        """Children of element eid, creating them on first use."""
        ch = self._children.get(eid)
        if ch is None:
            v0, v1, v2 = self.elem_verts[eid]
            lvl = self.elem_level[eid] + 1
            m = self.midpoint(v0, v1, level=lvl)
            c1 = len(self.elem_verts)
            self.elem_verts.append((v2, v0, m))
            self.elem_level.append(lvl)
            self.elem_parent.append(eid)
            c2 = c1 + 1
            self.elem_verts.append((v1, v2, m))
            self.elem_level.append(lvl)
            self.elem_parent.append(eid)
            ch = (c1, c2)
            self._children[eid] = ch
        return ch

    def ancestor_in(self, eid, id_set):
        """Walk parents of eid until an id contained in id_set is found."""
        e = eid
        while e >= 0:
            if e in id_set:
                return e
            e = self.elem_parent[e]
        raise KeyError(f"element {eid} has no ancestor in the given mesh")


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


class Triangulation:
    """Immutable conforming mesh = a set of forest elements.

    Derived incidence data (edges, neighbors, boundary loops, vertex
    stars) is computed once at construction and never mutated.
    """

    def __init__(self, forest, element_ids, generation=0):
        self.forest = forest
        self.element_ids = np.asarray(sorted(element_ids), dtype=np.int64)
        self.generation = generation
        ev = np.array([forest.elem_verts[e] for e in self.element_ids], dtype=np.int64)
        self.tri_g = ev  # global vertex ids, (nt, 3)
        self.levels = np.array([forest.elem_level[e] for e in self.element_ids], dtype=np.int64)
        self.vert_ids = np.unique(ev)
        self.coords = np.array([forest.coords[v] for v in self.vert_ids])
        self.tri = np.searchsorted(self.vert_ids, ev)  # local vertex indices
        self._build_edges()
        self._check_conforming()
        self._build_boundary()
        self._build_stars()

    # -- construction helpers ------------------------------------------------

    def _build_edges(self):
        # local edge j of a triangle is opposite local vertex j
        t = self.tri
        e_all = np.stack(
            [
                np.sort(t[:, [1, 2]], axis=1),
                np.sort(t[:, [2, 0]], axis=1),
                np.sort(t[:, [0, 1]], axis=1),
            ],
            axis=1,
        )  # (nt, 3, 2)
        flat = e_all.reshape(-1, 2)
        self.edges, inv, counts = np.unique(
            flat, axis=0, return_inverse=True, return_counts=True
        )
        self.tri_edges = inv.reshape(-1, 3)  # edge index per (triangle, local edge)
        self.edge_count = counts
        # neighbor per (triangle, local edge); -1 on the boundary
        nt = len(self.tri)
        owner = -np.ones((len(self.edges), 2), dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        for idx in order:
            e = inv[idx]
            slot = 0 if owner[e, 0] < 0 else 1
            owner[e, slot] = idx // 3
        self.edge_tris = owner
        nb = -np.ones((nt, 3), dtype=np.int64)
        for k in range(3):
            e = self.tri_edges[:, k]
            both = owner[e]
            rows = np.arange(nt)
            nb[:, k] = np.where(both[:, 0] == rows, both[:, 1], both[:, 0])
        self.neighbors = nb

    def _check_conforming(self):
        if np.any(self.edge_count > 2):
            raise ValueError("non-conforming mesh: edge shared by > 2 triangles")
        p = self.coords
        t = self.tri
        area2 = _cross2(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
        if np.any(area2 <= 0):
            raise ValueError("mesh contains non-CCW or degenerate triangles")
        self.area = 0.5 * area2

    def _build_boundary(self):
        # directed boundary edges in CCW triangle order (domain on the left)
        bmask = self.edge_count == 1
        directed = {}
        for ti in np.nonzero(np.any(bmask[self.tri_edges], axis=1))[0]:
            for k in range(3):
                e = self.tri_edges[ti, k]
                if bmask[e]:
                    a = self.tri[ti, (k + 1) % 3]
                    b = self.tri[ti, (k + 2) % 3]
                    directed[a] = (b, ti, e)
        loops = []
        seen = set()
        for start in sorted(directed):
            if start in seen:
                continue
            loop = []
            a = start
            while True:
                b, ti, e = directed[a]
                loop.append((a, b, ti, e))
                seen.add(a)
                a = b
                if a == start:
                    break
        # ordered local-vertex-index boundary edges with adjacent triangle
            loops.append(loop)
        self.boundary_loops = loops
        self.boundary_edges = np.array(
            [(a, b) for loop in loops for (a, b, ti, e) in loop], dtype=np.int64
        ).reshape(-1, 2)
        self.boundary_tri = np.array(
            [ti for loop in loops for (a, b, ti, e) in loop], dtype=np.int64
        )
        self.boundary_edge_ids = np.array(
            [e for loop in loops for (a, b, ti, e) in loop], dtype=np.int64
        )

    def _build_stars(self):
        # vertex -> incident triangles, CSR-ish
        nt = len(self.tri)
        order = np.argsort(self.tri.ravel(), kind="stable")
        self._star_tris = order // 3
        self._star_ptr = np.searchsorted(self.tri.ravel()[order], np.arange(len(self.vert_ids) + 1))

    # -- queries -------------------------------------------------------------

    @property
    def n_elements(self):
        return len(self.tri)

    @property
    def n_vertices(self):
        return len(self.vert_ids)

    def star(self, local_vertex):
        """Triangles incident to a local vertex index."""
        lo, hi = self._star_ptr[local_vertex], self._star_ptr[local_vertex + 1]
        return self._star_tris[lo:hi]

    def diameters(self):
        p = self.coords
        t = self.tri
        d0 = np.linalg.norm(p[t[:, 1]] - p[t[:, 2]], axis=1)
        d1 = np.linalg.norm(p[t[:, 2]] - p[t[:, 0]], axis=1)
        d2 = np.linalg.norm(p[t[:, 0]] - p[t[:, 1]], axis=1)
        return np.maximum(np.maximum(d0, d1), d2)

    def vertex_neighbors_of(self, elems):
        """All triangles sharing at least a vertex with the given set."""
        mask = np.zeros(self.n_elements, dtype=bool)
        vmask = np.zeros(self.n_vertices, dtype=bool)
        vmask[self.tri[np.asarray(list(elems), dtype=np.int64)].ravel()] = True
        mask = vmask[self.tri].any(axis=1)
        return np.nonzero(mask)[0]

    def contains_id(self, eid):
        i = np.searchsorted(self.element_ids, eid)
        return i < len(self.element_ids) and self.element_ids[i] == eid

    def local_index(self, eid):
        i = np.searchsorted(self.element_ids, eid)
        if i >= len(self.element_ids) or self.element_ids[i] != eid:
            raise KeyError(f"element id {eid} not in mesh")
        return int(i)

    def locate_point(self, x, eps=1e-12):
        """Element (local index) containing point x, by genealogy descent."""
        x = np.asarray(x, dtype=float)
        ids = set(int(e) for e in self.element_ids)
        f = self.forest
        roots = [e for e, p in enumerate(f.elem_parent) if p == -1]
        best = None
        for r in roots:
            if _bary_inside(f, r, x, eps):
                best = r
                break
        if best is None:
            raise ValueError(f"point {x} outside the mesh")
        while best not in ids:
            ch = f._children.get(best)
            if ch is None:
                raise ValueError(f"point {x} in element missing from mesh")
            nxt = None
            for c in ch:
                if _bary_inside(f, c, x, eps):
                    nxt = c
                    break
            best = nxt if nxt is not None else ch[0]
        return self.local_index(best)


def _bary_inside(forest, eid, x, eps):
    a, b, c = (np.array(forest.coords[v]) for v in forest.elem_verts[eid])
    M = np.column_stack([b - a, c - a])
    try:
        lam = np.linalg.solve(M, x - a)
    except np.linalg.LinAlgError:
        return False
    return lam[0] >= -eps and lam[1] >= -eps and lam[0] + lam[1] <= 1 + eps


@dataclass(frozen=True)
class MeshHierarchy:
    """Uniformly refined mesh family (levels[l+1] = refine^k(levels[l], all))."""

    k_mesh: int
    levels: list
    c_mesh: float


def _longest_ref_edge(coords, tri):
    """Rotate each triangle so its longest edge (tie: smallest opposite
    vertex index) comes first, preserving CCW orientation."""
    out = []
    for t in tri:
        p = [np.asarray(coords[v], dtype=float) for v in t]
        # edge j is opposite vertex j
        lens = [np.linalg.norm(p[(j + 1) % 3] - p[(j + 2) % 3]) for j in range(3)]
        best = 0
        for j in (1, 2):
            if lens[j] > lens[best] + 1e-14 or (
                abs(lens[j] - lens[best]) <= 1e-14 and t[j] < t[best]
            ):
                best = j
        # reference edge is (v0, v1), i.e. the edge opposite v2: rotate so
        # the chosen edge's opposite vertex lands in slot 2
        rot = (best + 1) % 3
        out.append((t[rot], t[(rot + 1) % 3], t[(rot + 2) % 3]))
    return out


def root_mesh(coords, triangles):
    """Build a root Triangulation; fixes orientation and reference edges."""
    coords = [tuple(map(float, p)) for p in coords]
    tri = []
    for t in triangles:
        a, b, c = (int(v) for v in t)
        pa, pb, pc = (np.array(coords[v]) for v in (a, b, c))
        if _cross2(pb - pa, pc - pa) < 0:
            a, b, c = a, c, b
        tri.append((a, b, c))
    tri = _longest_ref_edge(coords, tri)
    forest = RefinementForest(coords, tri)
    return Triangulation(forest, range(len(tri)))


def element_level(mesh, element):
    """Number of bisections separating the element from its root ancestor."""
    return int(mesh.levels[element])


def nvb_refine(mesh, marked):
    """Refine all marked elements (local indices) by newest-vertex bisection.

    The usual edge-marking closure runs first: whenever any edge of a
    triangle is marked for refinement, its reference edge is marked too,
    so the bisected mesh is conforming without hanging nodes.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_elements):
        raise IndexError("marked element index out of range")
    if marked.size == 0:
        return mesh
    f = mesh.forest
    g = mesh.tri_g
    marked_edges = set(_edge_key(int(g[m, 0]), int(g[m, 1])) for m in marked)
    # closure: any marked edge forces the owner's reference edge
    changed = True
    while changed:
        changed = False
        for ti in range(mesh.n_elements):
            v0, v1, v2 = (int(v) for v in g[ti])
            ref = _edge_key(v0, v1)
            if ref in marked_edges:
                continue
            if (
                _edge_key(v1, v2) in marked_edges
                or _edge_key(v2, v0) in marked_edges
            ):
                marked_edges.add(ref)
                changed = True
    out = []

    def emit(eid):
        v = f.elem_verts[eid]
        if _edge_key(v[0], v[1]) in marked_edges:
            for c in f.bisect(eid):
                emit(c)
        else:
            out.append(eid)

    for eid in mesh.element_ids:
        emit(int(eid))
    return Triangulation(f, out, generation=mesh.generation + 1)


def patch(mesh, seed, k=1):
    """Iterated vertex-touching patch omega^k(seed) as local element indices."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.isscalar(seed):
        cur = {int(seed)}
    else:
        cur = set(int(s) for s in seed)
    for _ in range(k):
        cur = set(mesh.vertex_neighbors_of(cur).tolist())
    return cur


def _patch_max_levels(mesh, k):
    """max level over omega^k(T) for every T, via vertex max-propagation."""
    lev = mesh.levels.astype(np.int64)
    cur = lev.copy()
    for _ in range(k):
        vmax = np.full(mesh.n_vertices, -1, dtype=np.int64)
        for j in range(3):
            np.maximum.at(vmax, mesh.tri[:, j], cur)
        cur = vmax[mesh.tri].max(axis=1)
    return cur


def grading_ok(mesh, cfg):
    """Exact check of the patch level-grading condition."""
    return bool(np.all(_patch_max_levels(mesh, cfg.d_grad) - mesh.levels <= 1))


def enforce_grading(mesh, cfg):
    """Refine until |level(T) - level(T')| <= 1 over omega^{d_grad} patches."""
    while True:
        gap = _patch_max_levels(mesh, cfg.d_grad) - mesh.levels
        bad = np.nonzero(gap >= 2)[0]
        if bad.size == 0:
            return mesh
        mesh = nvb_refine(mesh, bad)


def uniform_hierarchy(root, k_mesh, L):
    """Uniform family: each step bisects every element k_mesh times."""
    if k_mesh < 1 or L < 0:
        raise ValueError("k_mesh >= 1 and L >= 0 required")
    levels = [root]
    for _ in range(L):
        m = levels[-1]
        for _ in range(k_mesh):
            m = nvb_refine(m, np.arange(m.n_elements))
        levels.append(m)
    if L > 0:
        ratios = [
            levels[l].diameters().max() / levels[l + 1].diameters().max()
            for l in range(L)
        ]
        c_mesh = float(np.exp(np.mean(np.log(ratios))))
    else:
        c_mesh = float("nan")
    return MeshHierarchy(k_mesh=k_mesh, levels=levels, c_mesh=c_mesh)


# -- domain presets ----------------------------------------------------------


def square_root():
    """Unit square split along the diagonal."""
    coords = [(0, 0), (1, 0), (1, 1), (0, 1)]
    return root_mesh(coords, [(0, 1, 2), (0, 2, 3)])


def lshape_root():
    """L-shaped domain (-1,1)^2 minus the fourth quadrant, 6 triangles."""
    coords = [
        (0, 0), (1, 0), (1, 1), (0, 1), (-1, 1),
        (-1, 0), (-1, -1), (0, -1),
    ]
    tris = [
        (0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 5, 6), (0, 6, 7),
    ]
    return root_mesh(coords, tris)


def slit_root():
    """Square (-1,1)^2 slit along the segment (0,0)-(1,0).

    The slit endpoint on the outer boundary is stored twice (lower/upper
    copy) so the boundary is a single closed loop through both slit sides.
    """
    coords = [
        (0, 0),            # 0: slit tip (shared)
        (1, 0),            # 1: slit mouth, lower side
        (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1),
        (1, 0),            # 9: slit mouth, upper side
    ]
    ring = [1, 2, 3, 4, 5, 6, 7, 8, 9]
    tris = [(0, ring[i], ring[i + 1]) for i in range(len(ring) - 1)]
    return root_mesh(coords, tris)


# -- plain-text mesh files ---------------------------------------------------


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.n_vertices}\n")
        for i, (x, y) in enumerate(mesh.coords):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
        fh.write(f"triangles {mesh.n_elements}\n")
        for i, t in enumerate(mesh.tri):
            # stored reference edge is (v0, v1) = local edge opposite v2
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} 2\n")
        fh.write(f"boundary {len(mesh.boundary_edges)}\n")
        for a, b in mesh.boundary_edges:
            fh.write(f"{a} {b}\n")


def load_mesh(path):
    """Load the plain-text format written by save_mesh.

    Triangle lines carry a local reference-edge index (edge j is the edge
    opposite vertex j); triangles are rotated so that edge comes first.
    """
    with open(path) as fh:
        tok = fh.read().split()
    pos = 0

    def take():
        nonlocal pos
        v = tok[pos]
        pos += 1
        return v

    if take() != "nodes":
        raise ValueError("mesh file: expected 'nodes'")
    nv = int(take())
    coords = [None] * nv
    for _ in range(nv):
        i = int(take())
        coords[i] = (float(take()), float(take()))
    if take() != "triangles":
        raise ValueError("mesh file: expected 'triangles'")
    nt = int(take())
    tris = [None] * nt
    for _ in range(nt):
        i = int(take())
        v = (int(take()), int(take()), int(take()))
        ref = int(take())
        rot = (ref + 1) % 3  # rotate so vertex opposite the ref edge is last
        tris[i] = (v[rot], v[(rot + 1) % 3], v[(rot + 2) % 3])
    if take() != "boundary":
        raise ValueError("mesh file: expected 'boundary'")
    nb = int(take())
    listed = set()
    for _ in range(nb):
        listed.add(_edge_key(int(take()), int(take())))
    tris_ccw = []
    for a, b, c in tris:
        pa, pb, pc = (np.array(coords[v]) for v in (a, b, c))
        if _cross2(pb - pa, pc - pa) < 0:
            raise ValueError("mesh file: triangle not counterclockwise")
        tris_ccw.append((a, b, c))
    forest = RefinementForest(coords, tris_ccw)
    mesh = Triangulation(forest, range(nt))
    actual = set(
        _edge_key(int(mesh.vert_ids[a]), int(mesh.vert_ids[b]))
        for a, b in mesh.boundary_edges
    )
    if listed != actual:
        raise ValueError("mesh file: boundary edge list does not match triangles")
    return mesh
