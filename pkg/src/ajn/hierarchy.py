"""Hierarchical basis sections (B^1, B^1/2, B^-1/2) for adaptive runs.

Each basis function is stored per element: a list of (forest element id,
7 local S2+ coefficients) rows, usually mixing two uniform levels (the
generating dof on T-hat_l and its Scott-Zhang correction on T-hat_{l-1}).
All pairings are integrated on the finer element of each overlapping row
pair, found through the forest genealogy, so functions from arbitrary
levels combine without ever building a global fine mesh.  Uniform meshes
are only materialized as local patches around each dof (pruned pure
bisection descent from the root elements), which keeps deep adaptive
runs affordable: the full uniform mesh at the deepest level reached
would be exponentially large.

Selection of dofs per uniform level l: hats at new vertices, edge
bubbles of new edges, bubbles of all elements (bubbles never survive
refinement, see spaces.py on non-nestedness).  One sub-edge bubble per
split coarser edge is skipped: the coarse edge bubble is P2 and exactly
representable by fine hats and the sub-edge bubbles along it, so keeping
all of them would make the sections linearly dependent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quadrature import TRI_POINTS, TRI_WEIGHTS, EDGE_POINTS, EDGE_WEIGHTS
from . import mesh as meshmod
from .mesh import Triangulation

__all__ = [
    "ElemFunc",
    "HierFunction",
    "HierBasis",
    "BoundaryHosts",
    "hierarchical_basis",
    "dump_basis",
    "elem_geometry",
    "inner",
    "values_on",
    "gradients_on",
    "panel_pairs",
    "panel_l2",
]


# -- per-element functions ---------------------------------------------------

@dataclass
class ElemFunc:
    """A piecewise-S2+ function as rows of local coefficients.

    Rows may overlap (an element id may be a descendant of another row's
    element); the function value is the sum of all row contributions.
    """

    eids: np.ndarray  # (n,) forest element ids, int64
    C: np.ndarray     # (n,7) local coefficients


def _coords_arr(forest):
    arr = getattr(forest, "_coords_cache", None)
    if arr is None or len(arr) != len(forest.coords):
        arr = np.array(forest.coords, dtype=float)
        forest._coords_cache = arr
    return arr


def elem_geometry(forest, eids):
    """Coords (n,3,2), areas (n,), and barycentric gradients (n,3,2)."""
    ev = np.array([forest.elem_verts[int(e)] for e in eids], dtype=np.int64)
    ev = ev.reshape(-1, 3)
    coords = _coords_arr(forest)[ev]
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    g = np.empty((len(ev), 3, 2))
    a2 = 2 * area
    for i in range(3):
        pj, pk = coords[:, (i + 1) % 3], coords[:, (i + 2) % 3]
        g[:, i, 0] = (pj[:, 1] - pk[:, 1]) / a2
        g[:, i, 1] = (pk[:, 0] - pj[:, 0]) / a2
    return coords, area, g


def _ancestor_at(forest, eid, nvb_level):
    e = int(eid)
    while forest.elem_level[e] > nvb_level:
        e = forest.elem_parent[e]
    if forest.elem_level[e] != nvb_level:
        raise ValueError(f"element {eid} has no ancestor at level {nvb_level}")
    return e


def _is_resolved(forest, eid, id_set):
    """True if the mesh with elements id_set is at least as fine as eid
    on eid's area (no strict ancestor of eid is a mesh element)."""
    e = forest.elem_parent[int(eid)]
    while e >= 0:
        if e in id_set:
            return False
        e = forest.elem_parent[e]
    return True


def _pair_table(forest, fa, fb):
    """Overlapping row pairs of two ElemFuncs.

    Returns (dom, ia, ib) where dom is the finer element of each pair
    (the integration domain), ia/ib index rows of fa/fb.  Every
    overlapping pair appears exactly once.
    """
    amap = {}
    for i, e in enumerate(fa.eids):
        amap.setdefault(int(e), []).append(i)
    bmap = {}
    for j, e in enumerate(fb.eids):
        bmap.setdefault(int(e), []).append(j)
    dom, ia, ib = [], [], []
    for i, e in enumerate(fa.eids):
        p = forest.elem_parent[int(e)]
        while p >= 0:
            for j in bmap.get(p, ()):
                dom.append(int(e))
                ia.append(i)
                ib.append(j)
            p = forest.elem_parent[p]
    for j, e in enumerate(fb.eids):
        c = int(e)
        while c >= 0:
            for i in amap.get(c, ()):
                dom.append(int(e))
                ia.append(i)
                ib.append(j)
            c = forest.elem_parent[c]
    return (
        np.array(dom, dtype=np.int64),
        np.array(ia, dtype=np.int64),
        np.array(ib, dtype=np.int64),
    )


def _barycentric_in(coords, pts):
    """Barycentric coordinates of pts (n,q,2) w.r.t. triangles (n,3,2)."""
    M = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=2)
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    Minv = np.empty_like(M)
    Minv[:, 0, 0] = M[:, 1, 1] / det
    Minv[:, 0, 1] = -M[:, 0, 1] / det
    Minv[:, 1, 0] = -M[:, 1, 0] / det
    Minv[:, 1, 1] = M[:, 0, 0] / det
    st = np.einsum("nab,nqb->nqa", Minv, pts - coords[:, None, 0])
    return np.concatenate([1 - st.sum(axis=2, keepdims=True), st], axis=2)


def inner(forest, fa, fb):
    """(H1-seminorm pairing, L2 pairing) of two ElemFuncs."""
    from .spaces import shape_values, shape_dlambda

    dom, ia, ib = _pair_table(forest, fa, fb)
    if len(dom) == 0:
        return 0.0, 0.0
    dcoords, darea, _ = elem_geometry(forest, dom)
    pts = np.einsum("qa,nab->nqb", TRI_POINTS, dcoords)
    h1 = 0.0
    l2 = 0.0
    # evaluate each side on its own (possibly coarser) element
    sides = []
    for f, rows, eids in ((fa, ia, fa.eids), (fb, ib, fb.eids)):
        se = eids[rows]
        scoords, _, sgrad = elem_geometry(forest, se)
        lam = _barycentric_in(scoords, pts)
        N = shape_values(lam.reshape(-1, 3)).reshape(len(dom), -1, 7)
        dN = shape_dlambda(lam.reshape(-1, 3)).reshape(len(dom), -1, 7, 3)
        c = f.C[rows]
        vals = np.einsum("nqj,nj->nq", N, c)
        grads = np.einsum("nqja,nab,nj->nqb", dN, sgrad, c)
        sides.append((vals, grads))
    (va, ga), (vb, gb) = sides
    h1 = float(np.einsum("nqb,nqb,q,n->", ga, gb, TRI_WEIGHTS, darea))
    l2 = float(np.einsum("nq,nq,q,n->", va, vb, TRI_WEIGHTS, darea))
    return h1, l2


def h1_norm(forest, f):
    h1, l2 = inner(forest, f, f)
    return float(np.sqrt(h1 + l2))


def _rows_for(forest, f, eids):
    """Row index of f on each target element's ancestor-or-self, -1 if none.

    Targets must be at least as fine as f's rows wherever they overlap.
    Returns a list of (target index, row index) pairs (several rows can
    cover one target when f mixes levels)."""
    fmap = {}
    for i, e in enumerate(f.eids):
        fmap.setdefault(int(e), []).append(i)
    out = []
    for t, e in enumerate(eids):
        c = int(e)
        while c >= 0:
            for i in fmap.get(c, ()):
                out.append((t, i))
            c = forest.elem_parent[c]
    return out


def values_on(forest, f, eids, lam):
    """Values of f at barycentric points lam (q,3) of the given elements.

    The elements must each be contained in (or equal to) any row element
    they overlap, so the restriction is a polynomial per element."""
    from .spaces import shape_values

    lam = np.atleast_2d(lam)
    eids = np.asarray(eids, dtype=np.int64)
    out = np.zeros((len(eids), len(lam)))
    hits = _rows_for(forest, f, eids)
    if not hits:
        return out
    ti = np.array([h[0] for h in hits], dtype=np.int64)
    ri = np.array([h[1] for h in hits], dtype=np.int64)
    tcoords, _, _ = elem_geometry(forest, eids[ti])
    pts = np.einsum("qa,nab->nqb", lam, tcoords)
    scoords, _, _ = elem_geometry(forest, f.eids[ri])
    slam = _barycentric_in(scoords, pts)
    N = shape_values(slam.reshape(-1, 3)).reshape(len(ti), -1, 7)
    vals = np.einsum("nqj,nj->nq", N, f.C[ri])
    np.add.at(out, ti, vals)
    return out


def gradients_on(forest, f, eids, lam):
    """Physical gradients of f, same conventions as values_on, (n,q,2)."""
    from .spaces import shape_dlambda

    lam = np.atleast_2d(lam)
    eids = np.asarray(eids, dtype=np.int64)
    out = np.zeros((len(eids), len(lam), 2))
    hits = _rows_for(forest, f, eids)
    if not hits:
        return out
    ti = np.array([h[0] for h in hits], dtype=np.int64)
    ri = np.array([h[1] for h in hits], dtype=np.int64)
    tcoords, _, _ = elem_geometry(forest, eids[ti])
    pts = np.einsum("qa,nab->nqb", lam, tcoords)
    scoords, _, sgrad = elem_geometry(forest, f.eids[ri])
    slam = _barycentric_in(scoords, pts)
    dN = shape_dlambda(slam.reshape(-1, 3)).reshape(len(ti), -1, 7, 3)
    grads = np.einsum("nqja,nab,nj->nqb", dN, sgrad, f.C[ri])
    np.add.at(out, ti, grads)
    return out


# -- local uniform patches ---------------------------------------------------

def _bbox_of(forest, eids):
    coords, area, _ = elem_geometry(forest, eids)
    lo = coords.reshape(-1, 2).min(axis=0)
    hi = coords.reshape(-1, 2).max(axis=0)
    return lo, hi


def uniform_elements_near(forest, nvb_level, lo, hi):
    """All forest elements of the given NVB level whose bounding box
    intersects [lo, hi], creating them by pure bisection as needed."""
    keep = []
    tol = 1e-12 * max(hi[0] - lo[0], hi[1] - lo[1], 1.0)

    def rec(eid):
        pts = np.array([forest.coords[v] for v in forest.elem_verts[eid]])
        if (
            pts[:, 0].max() < lo[0] - tol
            or pts[:, 0].min() > hi[0] + tol
            or pts[:, 1].max() < lo[1] - tol
            or pts[:, 1].min() > hi[1] + tol
        ):
            return
        if forest.elem_level[eid] == nvb_level:
            keep.append(eid)
            return
        for c in forest.bisect(eid):
            rec(c)

    for r in range(forest.n_roots):
        rec(r)
    return keep


def _descendants_at(forest, eid, nvb_level):
    if forest.elem_level[eid] == nvb_level:
        return [eid]
    out = []
    for c in forest.bisect(eid):
        out.extend(_descendants_at(forest, c, nvb_level))
    return out


# -- boundary bookkeeping ----------------------------------------------------

class BoundaryHosts:
    """Which straight root boundary segment a vertex/edge lies on.

    Assignment is by midpoint genealogy, not geometry alone, so the two
    sides of a slit (coincident segments, distinct vertex ids) stay
    separate."""

    def __init__(self, forest, root):
        self.forest = forest
        self.segments = []  # (ga, gb, pa, pb, length), directed CCW
        host0 = {}
        for loop in root.boundary_loops:
            for (a, b, ti, e) in loop:
                ga, gb = int(root.vert_ids[a]), int(root.vert_ids[b])
                pa = np.array(forest.coords[ga])
                pb = np.array(forest.coords[gb])
                s = len(self.segments)
                self.segments.append((ga, gb, pa, pb, float(np.linalg.norm(pb - pa))))
                host0.setdefault(ga, set()).add(s)
                host0.setdefault(gb, set()).add(s)
        self._host = {v: frozenset(s) for v, s in host0.items()}
        self._mid_inv = {}
        self._mid_scan = 0

    def _refresh(self):
        mid = self.forest._mid
        if len(mid) != self._mid_scan:
            self._mid_inv = {m: key for key, m in mid.items()}
            self._mid_scan = len(mid)

    def host(self, v):
        v = int(v)
        h = self._host.get(v)
        if h is not None:
            return h
        self._refresh()
        pq = self._mid_inv.get(v)
        if pq is None:
            h = frozenset()
        else:
            h = self.host(pq[0]) & self.host(pq[1])
        self._host[v] = h
        return h

    def edge_segment(self, ga, gb):
        """Segment index the edge (ga, gb) lies on, or None."""
        common = self.host(ga) & self.host(gb)
        if not common:
            return None
        if len(common) == 1:
            return next(iter(common))
        # both endpoints on two segments: corner-to-corner edge of a
        # short boundary piece; pick by geometry
        pa = np.array(self.forest.coords[int(ga)])
        pb = np.array(self.forest.coords[int(gb)])
        for s in sorted(common):
            _, _, qa, qb, ln = self.segments[s]
            d = qb - qa
            if (
                abs(meshmod._cross2(d, pa - qa)) < 1e-12 * ln * ln
                and abs(meshmod._cross2(d, pb - qa)) < 1e-12 * ln * ln
            ):
                return s
        return None

    def param(self, v, s):
        """Arc parameter of vertex v along segment s, in [0, 1]."""
        _, _, qa, qb, ln = self.segments[s]
        p = np.array(self.forest.coords[int(v)])
        return float(np.dot(p - qa, qb - qa) / (ln * ln))

    def on_gamma(self, v):
        return bool(self.host(v))


@dataclass
class PanelSet:
    """Piecewise-polynomial boundary data: per panel a segment index, a
    parameter interval, and local coefficients (P2 traces: value at the
    panel start, value at the end, edge-bubble amplitude; P1 densities:
    the two endpoint values)."""

    seg: np.ndarray    # (n,)
    t0: np.ndarray     # (n,) start parameter in the segment
    t1: np.ndarray     # (n,) end parameter, t1 > t0
    C: np.ndarray      # (n, 3) traces / (n, 2) densities


def panel_pairs(fa: PanelSet, fb: PanelSet):
    """Overlapping panel pairs: (i, j, lo, hi) parameter intervals."""
    out = []
    for i in range(len(fa.seg)):
        for j in range(len(fb.seg)):
            if fa.seg[i] != fb.seg[j]:
                continue
            lo = max(fa.t0[i], fb.t0[j])
            hi = min(fa.t1[i], fb.t1[j])
            if hi - lo > 1e-14:
                out.append((i, j, lo, hi))
    return out


def _panel_eval(ps, i, t):
    """Values of panel i of ps at segment parameters t."""
    s = (t - ps.t0[i]) / (ps.t1[i] - ps.t0[i])
    c = ps.C[i]
    if c.shape[-1] == 3:
        return c[0] * (1 - s) + c[1] * s + c[2] * 4 * s * (1 - s)
    return c[0] * (1 - s) + c[1] * s


def panel_l2(bh, fa, fb):
    """L2(Gamma) pairing of two panel sets."""
    tq, wq = EDGE_POINTS, EDGE_WEIGHTS
    total = 0.0
    for i, j, lo, hi in panel_pairs(fa, fb):
        t = lo + (hi - lo) * tq
        seglen = bh.segments[int(fa.seg[i])][4]
        va = _panel_eval(fa, i, t)
        vb = _panel_eval(fb, j, t)
        total += float(np.sum(wq * va * vb)) * (hi - lo) * seglen
    return total


# -- the hierarchical basis --------------------------------------------------

@dataclass
class HierFunction:
    level: int
    kind: str                 # volume | trace | density
    step: int                 # adaptive step at which the function enters
    label: tuple
    support: np.ndarray       # generating-dof support, forest element ids
    mid: np.ndarray           # area barycenter of the support
    elems: ElemFunc = None    # volume representation
    panels: PanelSet = None   # boundary representation


@dataclass
class HierBasis:
    """Ordered basis sections; the first n_l[j] functions span X_j."""

    hier: object
    forest: object
    boundary: BoundaryHosts
    volume: list
    trace: list
    density: list
    order: list               # [('volume'|'density', index), ...]
    n_l: list
    steps: int


def _local_edge_index(verts, a, b):
    i = verts.index(a)
    j = verts.index(b)
    return 3 + (3 - i - j)


def _collinear_within(pa, pb, qa, qb, tol):
    """True if segment (pa,pb) lies within segment (qa,qb)."""
    d = qb - qa
    ln2 = float(d @ d)
    for p in (pa, pb):
        if abs(meshmod._cross2(d, p - qa)) > tol * ln2:
            return False
        t = float((p - qa) @ d) / ln2
        if t < -1e-12 or t > 1 + 1e-12:
            return False
    return True


def hierarchical_basis(hier, adapted_meshes):
    """Build the basis sections for a nested, graded adaptive mesh family.

    Dofs are taken per uniform level of the hierarchy (hats at new
    vertices, bubbles of new edges/elements, minus the dependent
    sub-edge per split coarse edge), corrected by (1 - J_{l-1}) on local
    patches, H1-normalized, and ordered by the first adaptive step whose
    mesh resolves their support."""
    k = hier.k_mesh
    meshes = list(adapted_meshes)
    forest = hier.levels[0].forest
    if meshes[0].forest is not forest:
        raise ValueError("adapted meshes must share the hierarchy's forest")
    id_sets = [set(int(e) for e in m.element_ids) for m in meshes]
    for j in range(len(meshes) - 1):
        for eid in id_sets[j + 1]:
            e = eid
            while e >= 0 and e not in id_sets[j]:
                e = forest.elem_parent[e]
            if e < 0:
                raise ValueError(f"adapted mesh {j + 1} is not nested in mesh {j}")
    for j, m in enumerate(meshes):
        if not meshmod.grading_ok(m, meshmod.GradingConfig(d_grad=1)):
            raise ValueError(f"adapted mesh {j} violates the grading condition")

    root = hier.levels[0]
    bh = BoundaryHosts(forest, root)
    final = meshes[-1]
    lmax = int(np.ceil(final.levels.max() / k)) if final.levels.max() else 0

    # resolved uniform elements per level
    E = [set() for _ in range(lmax + 1)]
    E[0] = set(int(e) for e in root.element_ids)
    for eid, lev in zip(final.element_ids, final.levels):
        for l in range(1, int(lev) // k + 1):
            E[l].add(_ancestor_at(forest, int(eid), l * k))

    dofs = []  # (level, kind, ident, supp ids, rows)

    # level 0: every dof of the root mesh
    b0map = {int(v): i for i, v in enumerate(root.vert_ids)}
    for z in root.vert_ids:
        z = int(z)
        star = root.star(b0map[z])
        supp, rows = [], []
        for t in star:
            verts = forest.elem_verts[int(root.element_ids[t])]
            r = np.zeros(7)
            r[verts.index(z)] = 1.0
            supp.append(int(root.element_ids[t]))
            rows.append(r)
        dofs.append((0, "hat", (z,), supp, rows))
    for e, (a, b) in enumerate(root.edges):
        ga, gb = int(root.vert_ids[a]), int(root.vert_ids[b])
        supp, rows = [], []
        for t in root.edge_tris[e]:
            if t < 0:
                continue
            eid = int(root.element_ids[t])
            verts = forest.elem_verts[eid]
            r = np.zeros(7)
            r[_local_edge_index(list(verts), ga, gb)] = 1.0
            supp.append(eid)
            rows.append(r)
        dofs.append((0, "edge", (min(ga, gb), max(ga, gb)), supp, rows))
    for eid in sorted(E[0]):
        r = np.zeros(7)
        r[6] = 1.0
        dofs.append((0, "bub", (eid,), [eid], [r]))

    # vertex levels and final-mesh stars for hat completeness
    vlev = forest.vert_level
    for z in final.vert_ids:
        z = int(z)
        m = vlev[z]
        if m == 0:
            continue
        l = int(np.ceil(m / k))
        if l > lmax:
            continue
        zloc = int(np.searchsorted(final.vert_ids, z))
        star = final.star(zloc)
        if np.any(final.levels[star] < l * k):
            continue  # star never resolved at this dof's level
        supp = sorted({
            _ancestor_at(forest, int(final.element_ids[t]), l * k) for t in star
        })
        rows = []
        for eid in supp:
            verts = forest.elem_verts[eid]
            r = np.zeros(7)
            r[verts.index(z)] = 1.0
            rows.append(r)
        dofs.append((l, "hat", (z,), supp, rows))

    coords_arr = lambda v: np.array(forest.coords[int(v)])
    for l in range(1, lmax + 1):
        # edges of the resolved level-l elements
        edge_adj = {}
        for eid in E[l]:
            v0, v1, v2 = forest.elem_verts[eid]
            for a, b in ((v1, v2), (v2, v0), (v0, v1)):
                key = (a, b) if a < b else (b, a)
                edge_adj.setdefault(key, []).append(eid)
        for (a, b), adj in sorted(edge_adj.items()):
            seg = bh.edge_segment(a, b)
            if len(adj) < 2 and seg is None:
                continue  # interior edge with an unresolved side
            W = _ancestor_at(forest, adj[0], (l - 1) * k)
            wverts = list(forest.elem_verts[W])
            wedges = [
                (wverts[1], wverts[2]), (wverts[2], wverts[0]), (wverts[0], wverts[1])
            ]
            wkeys = {(x, y) if x < y else (y, x) for x, y in wedges}
            if (a, b) in wkeys:
                continue  # already an edge one level down, not new
            # drop rule: sub-edge of a split coarse edge that contains the
            # coarse endpoint with the smaller id
            drop = False
            pa, pb = coords_arr(a), coords_arr(b)
            for (x, y) in wkeys:
                if _collinear_within(pa, pb, coords_arr(x), coords_arr(y), 1e-12):
                    if min(x, y) in (a, b):
                        drop = True
                    break
            if drop:
                continue
            supp, rows = [], []
            for eid in sorted(adj):
                verts = forest.elem_verts[eid]
                r = np.zeros(7)
                r[_local_edge_index(list(verts), a, b)] = 1.0
                supp.append(eid)
                rows.append(r)
            dofs.append((l, "edge", (a, b), supp, rows))
        for eid in sorted(E[l]):
            r = np.zeros(7)
            r[6] = 1.0
            dofs.append((l, "bub", (eid,), [eid], [r]))

    # build the corrected, normalized volume functions
    volume = []
    for l, kind, ident, supp, rows in dofs:
        supp = np.asarray(supp, dtype=np.int64)
        C = np.asarray(rows, dtype=float)
        if l == 0:
            f = ElemFunc(supp.copy(), C.copy())
        else:
            ce, cc = _sz_correction(forest, bh, supp, C, l, k)
            f = ElemFunc(
                np.concatenate([supp, ce]), np.concatenate([C, cc], axis=0)
            )
        nrm = h1_norm(forest, f)
        if nrm < 1e-13:
            raise RuntimeError(f"degenerate basis function {(l, kind, ident)}")
        f = ElemFunc(f.eids, f.C / nrm)
        scoords, area, _ = elem_geometry(forest, supp)
        mid = (scoords.mean(axis=1) * area[:, None]).sum(axis=0) / area.sum()
        step = _entering_step(forest, supp, id_sets)
        if step is None:
            continue
        volume.append(
            HierFunction(
                level=l, kind="volume", step=step, label=(kind,) + tuple(ident),
                support=supp, mid=mid, elems=f,
            )
        )

    trace, density = _boundary_sections(forest, bh, root, volume)

    combined = [("volume", i) for i in range(len(volume))] + [
        ("density", i) for i in range(len(density))
    ]

    def sort_key(ki):
        w = volume[ki[1]] if ki[0] == "volume" else density[ki[1]]
        return (w.step, 0 if ki[0] == "volume" else 1, w.level, ki[1])

    combined.sort(key=sort_key)
    n_l = []
    for step in range(len(meshes)):
        n_l.append(
            sum(
                1
                for kk, i in combined
                if (volume[i] if kk == "volume" else density[i]).step <= step
            )
        )
    return HierBasis(
        hier=hier, forest=forest, boundary=bh,
        volume=volume, trace=trace, density=density,
        order=combined, n_l=n_l, steps=len(meshes),
    )


def _entering_step(forest, supp, id_sets):
    for j, ids in enumerate(id_sets):
        if all(_is_resolved(forest, e, ids) for e in supp):
            return j
    return None


def _sz_correction(forest, bh, supp, rows, l, k):
    """-J_{l-1} v0 as per-element rows on a local patch of T-hat_{l-1}."""
    from .spaces import S2PlusBasis, SZOperator, DiscreteFunction

    anc = sorted({_ancestor_at(forest, int(e), (l - 1) * k) for e in supp})
    acoords, _, _ = elem_geometry(forest, anc)
    diam = 0.0
    for i in range(3):
        diam = max(
            diam,
            float(np.linalg.norm(acoords[:, i] - acoords[:, (i + 1) % 3], axis=1).max()),
        )
    lo = acoords.reshape(-1, 2).min(axis=0) - 2 * diam
    hi = acoords.reshape(-1, 2).max(axis=0) + 2 * diam
    patch_ids = uniform_elements_near(forest, (l - 1) * k, lo, hi)
    fine_ids = []
    for e in patch_ids:
        fine_ids.extend(_descendants_at(forest, e, l * k))
    pc = Triangulation(forest, patch_ids)
    pf = Triangulation(forest, fine_ids)
    bc = S2PlusBasis(pc)
    bf = S2PlusBasis(pf)
    c = np.zeros(bf.dim)
    for eid, row in zip(supp, rows):
        t = pf.local_index(int(eid))
        c[bf.elem_dofs[t]] = row
    gamma_edges = [
        e
        for e, (a, b) in enumerate(pc.edges)
        if bh.edge_segment(int(pc.vert_ids[a]), int(pc.vert_ids[b])) is not None
    ]
    op = SZOperator(bc, boundary_edge_ids=np.asarray(gamma_edges, dtype=np.int64))
    jv = op(DiscreteFunction(bf, c))
    crows = jv.coeffs[bc.elem_dofs]
    keep = np.abs(crows).max(axis=1) > 1e-14
    return (
        np.asarray(pc.element_ids[keep], dtype=np.int64),
        -crows[keep],
    )


def _boundary_sections(forest, bh, root, volume):
    trace = []
    density = []
    # The level-0 hat traces form a partition of unity on each closed
    # boundary loop, so their arc-length derivatives sum to zero: one
    # hat-derivative per loop is redundant and must be skipped (the
    # constant density covers the missing direction).  Skip the hat
    # with the smallest vertex id of each loop.
    skip_ddt = set()
    for loop in root.boundary_loops:
        gids = [int(root.vert_ids[a]) for (a, b, ti, e) in loop]
        skip_ddt.add(("hat", min(gids)))
    # level-0 constant density on the whole boundary
    seg = np.arange(len(bh.segments), dtype=np.int64)
    const = PanelSet(
        seg=seg,
        t0=np.zeros(len(seg)),
        t1=np.ones(len(seg)),
        C=np.ones((len(seg), 2)),
    )
    gmid = np.mean(
        [0.5 * (s[2] + s[3]) for s in bh.segments], axis=0
    )
    density.append(
        HierFunction(
            level=0, kind="density", step=0, label=("const",),
            support=np.asarray(root.element_ids, dtype=np.int64),
            mid=np.asarray(gmid), panels=const,
        )
    )
    for vi, w in enumerate(volume):
        pseg, pt0, pt1, ptr, pde = [], [], [], [], []
        for eid, row in zip(w.elems.eids, w.elems.C):
            verts = list(forest.elem_verts[int(eid)])
            for le, (a, b) in enumerate(
                ((verts[1], verts[2]), (verts[2], verts[0]), (verts[0], verts[1]))
            ):
                s = bh.edge_segment(a, b)
                if s is None:
                    continue
                ta, tb = bh.param(a, s), bh.param(b, s)
                ca, cb = row[verts.index(a)], row[verts.index(b)]
                ce = row[3 + le]
                if ta > tb:
                    ta, tb, ca, cb = tb, ta, cb, ca
                if max(abs(ca), abs(cb), abs(ce)) < 1e-14:
                    continue
                h = (tb - ta) * bh.segments[s][4]
                pseg.append(s)
                pt0.append(ta)
                pt1.append(tb)
                ptr.append((ca, cb, ce))
                pde.append(((cb - ca + 4 * ce) / h, (cb - ca - 4 * ce) / h))
        if not pseg:
            continue
        tr = PanelSet(
            seg=np.asarray(pseg, dtype=np.int64),
            t0=np.asarray(pt0), t1=np.asarray(pt1), C=np.asarray(ptr),
        )
        de = PanelSet(
            seg=tr.seg.copy(), t0=tr.t0.copy(), t1=tr.t1.copy(),
            C=np.asarray(pde),
        )
        trace.append(
            HierFunction(
                level=w.level, kind="trace", step=w.step,
                label=("trace",) + w.label, support=w.support, mid=w.mid,
                panels=tr,
            )
        )
        if w.level == 0 and w.label in skip_ddt:
            continue
        density.append(
            HierFunction(
                level=w.level, kind="density", step=w.step,
                label=("ddt",) + w.label, support=w.support, mid=w.mid,
                panels=de,
            )
        )
    return trace, density


def dump_basis(hb, path):
    """Line-delimited text dump of the basis (one function per line)."""
    with open(path, "w") as fh:
        for kind, lst in (
            ("volume", hb.volume), ("trace", hb.trace), ("density", hb.density)
        ):
            for w in lst:
                supp = " ".join(str(int(s)) for s in w.support)
                if w.elems is not None:
                    data = " ".join(
                        f"{int(e)}:" + ",".join(repr(float(x)) for x in row)
                        for e, row in zip(w.elems.eids, w.elems.C)
                    )
                else:
                    data = " ".join(
                        f"{int(s)}:{t0!r}:{t1!r}:" + ",".join(repr(float(x)) for x in row)
                        for s, t0, t1, row in zip(
                            w.panels.seg, w.panels.t0, w.panels.t1, w.panels.C
                        )
                    )
                fh.write(f"{w.kind} {w.level} {w.step} | {supp} | {data}\n")
