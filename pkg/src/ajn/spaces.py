"""The S2+ finite element space and its projection machinery.

S2+(T) = P1 hats + one quadratic bubble per edge + one cubic bubble per
element, all bubbles sup-normalized.  On top of it:

* a moment-corrected basis (edge/hat functions with vanishing element
  and edge means),
* the modified Scott-Zhang projector J_T built from dual functionals on
  chosen sites (one element per bubble, one edge per hat/edge function),
* the composite coarsening projector S_l = J_l J_{l+1} ... on uniform
  hierarchies.

Degrees of freedom of S2+ are indexed [hats | edge bubbles | element
bubbles] in mesh-local order.

Note that S2+ spaces are not nested under refinement: hats and edge
bubbles of a mesh are exactly representable on any refinement (the P2
part nests), but an element bubble is a generic cubic on each child and
lies in no finer S2+ space.  Everything that needs nested trial spaces
therefore works with the hierarchical basis sections from hierarchy.py
instead of with literal space inclusions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .quadrature import TRI_POINTS, TRI_WEIGHTS, EDGE_POINTS, EDGE_WEIGHTS
from . import mesh as meshmod

__all__ = [
    "S2PlusBasis",
    "MomentBasis",
    "SZOperator",
    "DiscreteFunction",
    "HierFunction",
    "HierBasis",
    "build_s2plus",
    "build_moment_basis",
    "build_sz",
    "sz_apply",
    "composite_sz",
    "ancestor_map",
    "hierarchical_basis",
    "dump_basis",
]


# -- local shape functions ---------------------------------------------------

def shape_values(lam):
    """(npts, 7) values of the local S2+ shapes at barycentric points."""
    lam = np.atleast_2d(lam)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.stack(
        [l0, l1, l2, 4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1, 27 * l0 * l1 * l2],
        axis=1,
    )


def shape_dlambda(lam):
    """(npts, 7, 3) derivatives w.r.t. the barycentric coordinates."""
    lam = np.atleast_2d(lam)
    n = len(lam)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    d = np.zeros((n, 7, 3))
    d[:, 0, 0] = d[:, 1, 1] = d[:, 2, 2] = 1.0
    d[:, 3, 1] = 4 * l2
    d[:, 3, 2] = 4 * l1
    d[:, 4, 2] = 4 * l0
    d[:, 4, 0] = 4 * l2
    d[:, 5, 0] = 4 * l1
    d[:, 5, 1] = 4 * l0
    d[:, 6, 0] = 27 * l1 * l2
    d[:, 6, 1] = 27 * l2 * l0
    d[:, 6, 2] = 27 * l0 * l1
    return d


class S2PlusBasis:
    def __init__(self, mesh):
        self.mesh = mesh
        self.n_hat = mesh.n_vertices
        self.n_edge = len(mesh.edges)
        self.n_tri = mesh.n_elements
        self.dim = self.n_hat + self.n_edge + self.n_tri
        # element -> 7 global dofs [v0,v1,v2, e0,e1,e2, T]
        self.elem_dofs = np.concatenate(
            [
                mesh.tri,
                self.n_hat + mesh.tri_edges,
                (self.n_hat + self.n_edge + np.arange(self.n_tri))[:, None],
            ],
            axis=1,
        )
        # barycentric gradients per element: grad lambda_i, (nt, 3, 2)
        p = mesh.coords[mesh.tri]
        a2 = 2 * mesh.area
        g = np.empty((self.n_tri, 3, 2))
        for i in range(3):
            pj, pk = p[:, (i + 1) % 3], p[:, (i + 2) % 3]
            g[:, i, 0] = (pj[:, 1] - pk[:, 1]) / a2
            g[:, i, 1] = (pk[:, 0] - pj[:, 0]) / a2
        self.grad_lambda = g

    # -- element-local evaluation -------------------------------------------

    def grads_at(self, lam):
        """(nt, npts, 7, 2) physical gradients of the local shapes."""
        d = shape_dlambda(lam)
        return np.einsum("qja,nab->nqjb", d, self.grad_lambda)

    def laplacians_at(self, lam):
        """(nt, npts, 7) physical Laplacians of the local shapes."""
        lam = np.atleast_2d(lam)
        g = self.grad_lambda
        dot = np.einsum("nia,nja->nij", g, g)  # grad li . grad lj
        n, q = self.n_tri, len(lam)
        out = np.zeros((n, q, 7))
        # edge bubble 4*l_j l_k: Laplacian = 8 grad l_j . grad l_k
        for e, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
            out[:, :, 3 + e] = 8 * dot[:, j, k][:, None]
        # element bubble 27 l0 l1 l2
        l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
        out[:, :, 6] = 54 * (
            np.outer(dot[:, 1, 2], l0)
            + np.outer(dot[:, 2, 0], l1)
            + np.outer(dot[:, 0, 1], l2)
        )
        return out

    def local_matrices(self):
        """Per-element stiffness (nt,7,7) and mass (nt,7,7) matrices."""
        N = shape_values(TRI_POINTS)
        G = self.grads_at(TRI_POINTS)
        w = TRI_WEIGHTS
        K = np.einsum("nqjb,nqkb,q->njk", G, G, w) * self.mesh.area[:, None, None]
        M0 = np.einsum("qj,qk,q->jk", N, N, w)
        M = M0[None, :, :] * self.mesh.area[:, None, None]
        return K, M

    def assemble(self, local):
        """Scatter per-element (nt,7,7) matrices into a CSR matrix."""
        ed = self.elem_dofs
        rows = np.repeat(ed, 7, axis=1).ravel()
        cols = np.tile(ed, (1, 7)).ravel()
        return sp.csr_matrix(
            (local.ravel(), (rows, cols)), shape=(self.dim, self.dim)
        )

    def element_integrals(self):
        """(7,) exact integrals of the local shapes scaled by element area."""
        N = shape_values(TRI_POINTS)
        base = TRI_WEIGHTS @ N  # integral over the unit-measure triangle
        return base

    def interpolation_points(self):
        """Per-element nodes (verts, edge midpoints, centroid), (nt, 7, 2)."""
        m = self.mesh
        p = m.coords[m.tri]  # (nt,3,2)
        mids = 0.5 * (p[:, [1, 2, 0]] + p[:, [2, 0, 1]])
        cent = p.mean(axis=1, keepdims=True)
        return np.concatenate([p, mids, cent], axis=1)

    def interpolate_values(self, vert_vals, edge_mid_vals, centroid_vals):
        """S2+ coefficients from values at vertices, edge midpoints, centroids."""
        m = self.mesh
        c = np.zeros(self.dim)
        c[: self.n_hat] = vert_vals
        ev = m.edges
        hat_mid = 0.5 * (vert_vals[ev[:, 0]] + vert_vals[ev[:, 1]])
        c[self.n_hat : self.n_hat + self.n_edge] = edge_mid_vals - hat_mid
        hat_cent = vert_vals[m.tri].mean(axis=1)
        edge_cent = (4.0 / 9.0) * c[self.n_hat + m.tri_edges].sum(axis=1)
        c[self.n_hat + self.n_edge :] = centroid_vals - hat_cent - edge_cent
        return c

    def boundary_dof_mask(self):
        """Mask of dofs with nonzero trace (boundary hats + boundary edges)."""
        m = self.mesh
        mask = np.zeros(self.dim, dtype=bool)
        bverts = np.unique(m.boundary_edges)
        mask[bverts] = True
        mask[self.n_hat + m.boundary_edge_ids] = True
        return mask


def build_s2plus(mesh):
    return S2PlusBasis(mesh)


@dataclass
class DiscreteFunction:
    basis: S2PlusBasis
    coeffs: np.ndarray

    @property
    def mesh(self):
        return self.basis.mesh

    def element_values(self, lam):
        """(nt, npts) values at the same barycentric points in every element."""
        N = shape_values(lam)
        return np.einsum("qj,nj->nq", N, self.coeffs[self.basis.elem_dofs])

    def element_means(self):
        base = self.basis.element_integrals()
        return (self.coeffs[self.basis.elem_dofs] @ base) * self.mesh.area

    def h1_norm(self):
        K, M = self.basis.local_matrices()
        A = K + M
        c = self.coeffs[self.basis.elem_dofs]
        return float(np.sqrt(np.einsum("nj,njk,nk->", c, A, c)))

    def trace_values(self, t):
        """Values on each boundary edge at parameters t (CCW direction)."""
        m = self.mesh
        nb = len(m.boundary_edges)
        a, b = m.boundary_edges[:, 0], m.boundary_edges[:, 1]
        ca, cb = self.coeffs[a], self.coeffs[b]
        ce = self.coeffs[self.basis.n_hat + m.boundary_edge_ids]
        t = np.asarray(t)
        return (
            ca[:, None] * (1 - t)[None, :]
            + cb[:, None] * t[None, :]
            + ce[:, None] * (4 * t * (1 - t))[None, :]
        )


# -- moment-corrected basis --------------------------------------------------

class MomentBasis:
    """Change of basis S2+ -> moment basis (columns of to_standard)."""

    def __init__(self, basis):
        self.basis = basis
        m = basis.mesh
        nh, ne, nt = basis.n_hat, basis.n_edge, basis.n_tri
        base = basis.element_integrals()  # per unit area, local shapes
        if abs(base[6]) < 1e-14:
            raise RuntimeError("singular local moment system")
        # alpha = int_T (edge or hat shape) / int_T bubble; shape-independent
        self.alpha_edge = base[3] / base[6]
        self.alpha_hat = base[0] / base[6]
        # beta = int_E hat / int_E edge bubble on the shared edge
        tN = EDGE_POINTS
        w = EDGE_WEIGHTS
        int_hat = float(np.sum(w * (1 - tN)))
        int_bub = float(np.sum(w * 4 * tN * (1 - tN)))
        self.beta = int_hat / int_bub
        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        for j in range(nt):
            put(nh + ne + j, nh + ne + j, 1.0)
        # corrected edge functions: v_E - sum_T alpha v_T
        edge_elems = [[] for _ in range(ne)]
        for ti in range(nt):
            for k in range(3):
                edge_elems[m.tri_edges[ti, k]].append(ti)
        for e in range(ne):
            put(nh + e, nh + e, 1.0)
            for ti in edge_elems[e]:
                put(nh + ne + ti, nh + e, -self.alpha_edge)
        # corrected hats: v_z - sum_T alpha v_T - sum_{E owns z} beta v_{E,0}
        vert_elems = [[] for _ in range(nh)]
        for ti in range(nt):
            for k in range(3):
                vert_elems[m.tri[ti, k]].append(ti)
        for z in range(nh):
            put(z, z, 1.0)
            for ti in vert_elems[z]:
                put(nh + ne + ti, z, -self.alpha_hat)
            for e in np.nonzero((m.edges == z).any(axis=1))[0]:
                # expand beta * v_{E,0} in standard dofs
                put(nh + e, z, -self.beta)
                for ti in edge_elems[e]:
                    put(nh + ne + ti, z, self.beta * self.alpha_edge)
        self.to_standard = sp.csc_matrix(
            (vals, (rows, cols)), shape=(basis.dim, basis.dim)
        )
        self.to_standard.sum_duplicates()


def build_moment_basis(mesh, s2p):
    return MomentBasis(s2p)


# -- Scott-Zhang projector ---------------------------------------------------

def _edge_lengths(mesh):
    e = mesh.edges
    return np.linalg.norm(mesh.coords[e[:, 1]] - mesh.coords[e[:, 0]], axis=1)


class SZOperator:
    """Modified Scott-Zhang projector onto S2+(mesh).

    Functionals: bubbles use the element mean (the dual of the bubble
    within S2+(T) restricted to T is the constant, because the other
    moment-basis restrictions have zero element mean); hats and edge
    functions use dual functions in P2 on a chosen edge.  Hat sites are
    the lowest-index admissible edge, with boundary edges mandatory for
    boundary vertices so zero traces are preserved.
    """

    def __init__(self, basis, moment=None, boundary_edge_ids=None):
        self.basis = basis
        self.moment = moment if moment is not None else MomentBasis(basis)
        m = basis.mesh
        nh, ne = basis.n_hat, basis.n_edge
        self.edge_len = _edge_lengths(m)
        # boundary_edge_ids overrides the mesh's own boundary, so the
        # projector can run on a local patch whose rim is not part of Gamma
        if boundary_edge_ids is None:
            boundary_edge_ids = m.boundary_edge_ids
        bmask = np.zeros(ne, dtype=bool)
        bmask[boundary_edge_ids] = True
        vert_is_boundary = np.zeros(nh, dtype=bool)
        if len(boundary_edge_ids):
            vert_is_boundary[np.unique(m.edges[boundary_edge_ids])] = True
        # site choice by global vertex ids so that local patches and full
        # meshes make identical choices
        gid = m.vert_ids
        ekey = np.sort(gid[m.edges], axis=1)
        eorder = np.lexsort((ekey[:, 1], ekey[:, 0]))
        site = np.full(nh, -1, dtype=np.int64)
        for e in eorder:
            a, b = m.edges[e]
            for z in (a, b):
                if vert_is_boundary[z] and not bmask[e]:
                    continue
                if site[z] < 0:
                    site[z] = e
        if np.any(site < 0):
            # patch rims can strand a vertex without an admissible edge;
            # its dual never sees the projected function, any edge will do
            for e in eorder:
                a, b = m.edges[e]
                for z in (a, b):
                    if site[z] < 0:
                        site[z] = e
        self.hat_site = site
        # dual weights per edge: solve B c = rhs with
        # B[i, j] = int_E psi_i t^j ds over the three restricted functions
        # psi = (corrected hat at a, corrected hat at b, edge bubble)
        tq, wq = EDGE_POINTS, EDGE_WEIGHTS
        beta = self.moment.beta
        bub = 4 * tq * (1 - tq)
        psi = np.stack([(1 - tq) - beta * bub, tq - beta * bub, bub])
        mono = np.stack([np.ones_like(tq), tq, tq * tq])
        B0 = np.einsum("iq,jq,q->ij", psi, mono, wq)  # unit-length edge
        # dual weights scale as 1/h when B = h * B0; row w of dual0 holds
        # the monomial-moment weights of the functional dual to psi_w
        self.dual0 = np.linalg.inv(B0).T
        self._plans = {}

    # -- moments of the input function --------------------------------------

    def _edge_sites(self):
        return np.arange(self.basis.n_edge)

    def moments_callable(self, f):
        """Element means and edge monomial moments of a callable f(points)."""
        m = self.basis.mesh
        pts = np.einsum("qa,nab->nqb", TRI_POINTS, m.coords[m.tri])
        vals = f(pts.reshape(-1, 2)).reshape(len(m.tri), -1)
        means = (vals @ TRI_WEIGHTS) * m.area
        a, b = m.coords[m.edges[:, 0]], m.coords[m.edges[:, 1]]
        tq = EDGE_POINTS
        ep = a[:, None, :] * (1 - tq)[None, :, None] + b[:, None, :] * tq[None, :, None]
        ev = f(ep.reshape(-1, 2)).reshape(len(m.edges), -1)
        mono = np.stack([np.ones_like(tq), tq, tq * tq])
        emom = np.einsum("eq,jq,q,e->ej", ev, mono, EDGE_WEIGHTS, self.edge_len)
        return means, emom

    def transfer_plan(self, fine_mesh):
        """Cache arrays for integrating a fine-mesh function on my sites."""
        key = id(fine_mesh)
        plan = self._plans.get(key)
        if plan is None:
            plan = _TransferPlan(self.basis.mesh, fine_mesh)
            self._plans[key] = plan
        return plan

    def moments_discrete(self, v):
        plan = self.transfer_plan(v.mesh)
        return plan.moments(self, v)

    # -- application ---------------------------------------------------------

    def apply_moments(self, means, emom):
        """Assemble J v from element means and edge monomial moments."""
        b = self.basis
        nh, ne, nt = b.n_hat, b.n_edge, b.n_tri
        c_sz = np.zeros(b.dim)
        c_sz[nh + ne :] = means / (b.element_integrals()[6] * b.mesh.area)
        # edge-function coefficients: dual of psi_2 (constant row / h)
        d = self.dual0
        h = self.edge_len
        c_sz[nh : nh + ne] = (emom @ d[2]) / h
        hat_mom = emom[self.hat_site]
        hat_h = h[self.hat_site]
        a_is_z = b.mesh.edges[self.hat_site, 0] == np.arange(nh)
        rowsel = np.where(a_is_z, 0, 1)
        c_sz[:nh] = (
            np.einsum("zj,zj->z", hat_mom, d[rowsel]) / hat_h
        )
        return DiscreteFunction(b, self.moment.to_standard @ c_sz)

    def __call__(self, v):
        if isinstance(v, DiscreteFunction):
            if v.basis is self.basis:
                means = v.element_means()
                _, emom = self.moments_discrete(v)
                return self.apply_moments(means, emom)
            means, emom = self.moments_discrete(v)
            return self.apply_moments(means, emom)
        means, emom = self.moments_callable(v)
        return self.apply_moments(means, emom)


class _TransferPlan:
    """Quadrature bookkeeping to integrate a function living on a nested
    finer mesh over the elements and edges of a coarser mesh."""

    def __init__(self, coarse, fine):
        f = coarse.forest
        if fine.forest is not f:
            raise ValueError("meshes must belong to the same refinement forest")
        self.fine = fine
        self.coarse = coarse
        anc = ancestor_map(coarse, fine)
        if np.any(anc < 0):
            raise ValueError("fine mesh does not refine the projector's mesh")
        self.fine_to_coarse = anc
        # fine edges of each coarse edge, with parameter ranges
        fine_edge_set = {}
        for e, (a, b) in enumerate(fine.edges):
            fine_edge_set[_key(int(fine.vert_ids[a]), int(fine.vert_ids[b]))] = e
        fine_edge_owner = fine.edge_tris[:, 0]
        rows = []  # (coarse edge, fine tri, ga, gb, t0, t1)

        def split(ce, ga, gb, t0, t1):
            k = _key(ga, gb)
            fe = fine_edge_set.get(k)
            if fe is not None:
                rows.append((ce, int(fine_edge_owner[fe]), ga, gb, t0, t1))
                return
            mid = f.edge_midpoint_id(ga, gb)
            if mid is None:
                raise RuntimeError("fine mesh does not resolve coarse edge")
            tm = 0.5 * (t0 + t1)
            split(ce, ga, mid, t0, tm)
            split(ce, mid, gb, tm, t1)

        for ce, (a, b) in enumerate(coarse.edges):
            split(ce, int(coarse.vert_ids[a]), int(coarse.vert_ids[b]), 0.0, 1.0)
        # flatten to quadrature arrays
        tq, wq = EDGE_POINTS, EDGE_WEIGHTS
        nseg = len(rows)
        q = len(tq)
        self.seg_ce = np.array([r[0] for r in rows], dtype=np.int64)
        self.seg_tri = np.array([r[1] for r in rows], dtype=np.int64)
        lam = np.zeros((nseg, q, 3))
        tpar = np.zeros((nseg, q))
        scale = np.zeros(nseg)
        for i, (ce, ft, ga, gb, t0, t1) in enumerate(rows):
            tri_g = fine.tri_g[ft]
            la = np.zeros(3)
            lb = np.zeros(3)
            la[np.nonzero(tri_g == ga)[0][0]] = 1.0
            lb[np.nonzero(tri_g == gb)[0][0]] = 1.0
            lam[i] = np.outer(1 - tq, la) + np.outer(tq, lb)
            tpar[i] = t0 + (t1 - t0) * tq
            scale[i] = t1 - t0
        self.seg_lam = lam
        self.seg_t = tpar
        self.seg_scale = scale

    def moments(self, op, v):
        """(element means on coarse, edge monomial moments on coarse)."""
        coarse = self.coarse
        fine_means = v.element_means()
        means = np.zeros(coarse.n_elements)
        np.add.at(means, self.fine_to_coarse, fine_means)
        # edge moments: evaluate v segment-wise on the owning fine triangle
        cdofs = v.coeffs[v.basis.elem_dofs[self.seg_tri]]  # (nseg, 7)
        N = shape_values(self.seg_lam.reshape(-1, 3)).reshape(
            *self.seg_lam.shape[:2], 7
        )
        vals = np.einsum("sqj,sj->sq", N, cdofs)
        mono = np.stack(
            [np.ones_like(self.seg_t), self.seg_t, self.seg_t**2], axis=2
        )
        elen = op.edge_len[self.seg_ce] * self.seg_scale
        contrib = np.einsum("sq,sqj,q->sj", vals, mono, EDGE_WEIGHTS) * elen[:, None]
        emom = np.zeros((len(coarse.edges), 3))
        np.add.at(emom, self.seg_ce, contrib)
        return means, emom


def _key(a, b):
    return (a, b) if a < b else (b, a)


def build_sz(mesh_or_basis):
    """SZOperator for a mesh (cached on the mesh object)."""
    if isinstance(mesh_or_basis, S2PlusBasis):
        basis = mesh_or_basis
        mesh = basis.mesh
    else:
        mesh = mesh_or_basis
        basis = None
    op = getattr(mesh, "_sz_op", None)
    if op is None:
        op = SZOperator(basis if basis is not None else S2PlusBasis(mesh))
        mesh._sz_op = op
    return op


def sz_apply(op, v):
    """Coefficients of J v in S2+(op.basis.mesh)."""
    return op(v)


def composite_sz(hier, l, v):
    """S_l v = J_l J_{l+1} ... applied to discrete v on a finer level."""
    lev = None
    for i, m in enumerate(hier.levels):
        if m is v.mesh:
            lev = i
            break
    if lev is None:
        raise ValueError("input does not live on a hierarchy level")
    if l > lev:
        raise ValueError("target level deeper than the input level")
    cur = v
    for j in range(lev - 1, l - 1, -1):
        cur = build_sz(hier.levels[j])(cur)
    return cur


# -- prolongation ------------------------------------------------------------

def ancestor_map(coarse, fine):
    """Per fine element: local index of its coarse ancestor, -1 if none.

    Cached on the fine mesh (keeping the coarse mesh alive so the cache
    key stays unique)."""
    cache = getattr(fine, "_anc_maps", None)
    if cache is None:
        cache = fine._anc_maps = {}
    hit = cache.get(id(coarse))
    if hit is not None and hit[0] is coarse:
        return hit[1]
    f = coarse.forest
    if fine.forest is not f:
        raise ValueError("meshes must belong to the same refinement forest")
    coarse_ids = set(int(e) for e in coarse.element_ids)
    anc = np.full(fine.n_elements, -1, dtype=np.int64)
    for i, eid in enumerate(fine.element_ids):
        e = int(eid)
        while e >= 0 and e not in coarse_ids:
            e = f.elem_parent[e]
        if e >= 0:
            anc[i] = coarse.local_index(e)
    cache[id(coarse)] = (coarse, anc)
    return anc


# The hierarchical basis machinery lives in hierarchy.py; re-exported
# here because it operates on (and belongs with) the S2+ spaces.
from .hierarchy import (  # noqa: E402
    HierFunction,
    HierBasis,
    hierarchical_basis,
    dump_basis,
)
