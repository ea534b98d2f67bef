"""Adaptive solve-estimate-mark-refine driver and energy bookkeeping.

The driver runs the usual four-stage loop on nested NVB meshes: assemble
the stabilized coupled system, solve, compute a four-part residual
estimator, mark a minimal element set by bulk chasing with linear sums
of eta_T (a squared-sum variant is available as a config switch), then
refine and re-enforce the patch grading condition.

Energy bookkeeping never interpolates between the per-step nodal spaces
(they are not nested, see spaces.py).  Instead, all step solutions are
recomputed as leading sections of one Galerkin matrix in the
hierarchical basis of hierarchy.py, where the step-l space is literally
the span of the first n_l basis functions.  Increments and reference
errors are then quadratic forms of coefficient differences in a single
Gram matrix, and Galerkin orthogonality across steps holds exactly by
construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import GradingConfig, enforce_grading, grading_ok, nvb_refine
from .spaces import S2PlusBasis, shape_values, shape_dlambda
from .quadrature import TRI_POINTS, TRI_WEIGHTS, EDGE_POINTS, EDGE_WEIGHTS
from .hierarchy import (
    PanelSet,
    _barycentric_in,
    elem_geometry,
    gradients_on,
    hierarchical_basis,
    inner,
    values_on,
)
from .operators import (
    TWO_PI,
    CoupledSystem,
    assemble_coupled,
    boundary_geom,
    boundary_residual_derivative,
    cauchy_moments,
    log_moments,
    pair_k_block,
    pair_mass_block,
    pair_v_block,
    panel_p2_interp,
    _gauss01,
    _p1_vals,
    _p2_vals,
    _panel_frame,
)

__all__ = [
    "EstimatorResult",
    "AdaptiveConfig",
    "AdaptiveRunRecord",
    "solve",
    "estimate",
    "mark",
    "adaptive_loop",
    "x_distance",
    "HierGalerkin",
    "assemble_hierarchical",
    "section_solutions",
    "increment_energies",
    "reference_errors",
    "qo_ratios",
    "energy_norms",
]

DENSE_DOF_LIMIT = 6000
SOLVE_RTOL = 1e-12


# -- estimator / config / record ----------------------------------------------

@dataclass
class EstimatorResult:
    """Per-element estimator contributions eta_T >= 0."""

    per_element: np.ndarray

    @property
    def total(self):
        return float(np.sqrt(np.sum(self.per_element ** 2)))


@dataclass
class AdaptiveConfig:
    theta: float = 0.3
    d_grad: int = 4
    max_steps: int = 30
    max_dofs: int = None
    marking: str = "linear"

    def validate(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.marking not in ("linear", "squared"):
            raise ValueError(f"unknown marking mode {self.marking!r}")
        if self.d_grad < 1:
            raise ValueError("d_grad must be >= 1")


@dataclass
class AdaptiveRunRecord:
    """Per-step bookkeeping of one adaptive run.

    increments[k] = |u_{k+1} - u_k|_X^2 and ref_errors[k] =
    |u_ref - u_k|_X^2 are filled in by energy_norms once the
    hierarchical system is assembled (u_ref is the final solution).
    """

    config: AdaptiveConfig
    meshes: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    estimators: list = field(default_factory=list)
    marked: list = field(default_factory=list)
    n_dofs: list = field(default_factory=list)
    increments: np.ndarray = None
    ref_errors: np.ndarray = None

    def append(self, mesh, solution, est, marked, n_dofs):
        if self.n_dofs and n_dofs <= self.n_dofs[-1]:
            raise RuntimeError("dof count did not increase between steps")
        self.meshes.append(mesh)
        self.solutions.append(solution)
        self.estimators.append(est)
        self.marked.append(np.asarray(marked, dtype=np.int64))
        self.n_dofs.append(int(n_dofs))

    @property
    def n_steps(self):
        return len(self.meshes)

    @property
    def n_elements(self):
        return np.array([m.n_elements for m in self.meshes], dtype=np.int64)

    @property
    def eta(self):
        return np.array([e.total for e in self.estimators])


# -- linear solve --------------------------------------------------------------

def _dense_solve(M, b):
    """Direct solve with iterative refinement down to SOLVE_RTOL."""
    try:
        x = np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"direct solve failed on {len(b)} dofs: {exc}") from exc
    bnorm = float(np.linalg.norm(b))
    for _ in range(3):
        r = b - M @ x
        if np.linalg.norm(r) <= SOLVE_RTOL * bnorm:
            break
        x = x + np.linalg.solve(M, r)
    return x


def _krylov_solve(sys, b):
    """GMRES on the rank-1-stabilized operator, preconditioned by an
    incomplete factorization of the block part."""
    blocks = sp.bmat(
        [
            [sys.A, -sp.csr_matrix(sys.Mb).T],
            [sp.csr_matrix(0.5 * sys.Mb - sys.Kb), sp.csr_matrix(sys.Vb)],
        ],
        format="csc",
    )
    try:
        ilu = spla.spilu(blocks, drop_tol=1e-6, fill_factor=30)
    except RuntimeError as exc:
        raise RuntimeError(
            f"incomplete factorization failed on {sys.dim} dofs: {exc}"
        ) from exc
    op = spla.LinearOperator((sys.dim, sys.dim), matvec=sys.apply)
    pre = spla.LinearOperator((sys.dim, sys.dim), matvec=ilu.solve)
    x, info = spla.gmres(op, b, rtol=1e-14, atol=0.0, M=pre, maxiter=400, restart=200)
    res = float(np.linalg.norm(sys.apply(x) - b)) / float(np.linalg.norm(b))
    if info != 0 and res > SOLVE_RTOL:
        raise RuntimeError(
            f"gmres did not converge on {sys.dim} dofs (info={info}, "
            f"relative residual={res:.3e})"
        )
    return x


def solve(sys: CoupledSystem):
    """Solution coefficients of the coupled system, relative algebraic
    residual at most 1e-12 (direct dense up to 6000 dofs, preconditioned
    Krylov above)."""
    b = sys.rhs
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(sys.dim)
    if sys.dim <= DENSE_DOF_LIMIT:
        x = _dense_solve(sys.matrix(), b)
    else:
        x = _krylov_solve(sys, b)
    res = float(np.linalg.norm(sys.apply(x) - b)) / bnorm
    if res > SOLVE_RTOL:
        raise RuntimeError(
            f"linear solve stagnated: {sys.dim} dofs, relative residual {res:.3e}"
        )
    return x


# -- residual error estimator ---------------------------------------------------

def _element_grads_at(mesh, basis, u, elems, pts):
    """Gradients of the volume function at physical points pts (n, q, 2)
    inside the given elements (n,)."""
    coords = mesh.coords[mesh.tri[elems]]
    lam = _barycentric_in(coords, pts)
    dN = shape_dlambda(lam.reshape(-1, 3)).reshape(len(elems), -1, 7, 3)
    return np.einsum(
        "nqja,nab,nj->nqb", dN, basis.grad_lambda[elems], u[basis.elem_dofs[elems]]
    )


def estimate(sys: CoupledSystem, solution, data):
    """Four-part residual estimator: volume residual, interior normal
    jumps, boundary flux mismatch Phi + phi - dn u, and the tangential
    derivative of the boundary-integral residual."""
    mesh, basis, bg = sys.mesh, sys.basis, sys.bg
    x = np.asarray(solution, dtype=float)
    u = x[: sys.n1]
    phi = sys.density_coeffs(x[sys.n1 :])
    diam = mesh.diameters()
    eta2 = np.zeros(mesh.n_elements)

    # diam(T)^2 |F + Lap u|^2 over T
    lap = np.einsum(
        "nqj,nj->nq", basis.laplacians_at(TRI_POINTS), u[basis.elem_dofs]
    )
    if data.F is not None:
        pts = np.einsum("qa,nab->nqb", TRI_POINTS, mesh.coords[mesh.tri])
        lap = lap + np.asarray(data.F(pts.reshape(-1, 2)), dtype=float).reshape(
            mesh.n_elements, -1
        )
    eta2 += diam ** 2 * mesh.area * np.einsum("nq,q->n", lap * lap, TRI_WEIGHTS)

    # diam(T) |[dn u]|^2 over interior edges of dT
    interior = np.nonzero(mesh.edge_count == 2)[0]
    if interior.size:
        ea, eb = mesh.edges[interior, 0], mesh.edges[interior, 1]
        pa, pb = mesh.coords[ea], mesh.coords[eb]
        d = pb - pa
        elen = np.linalg.norm(d, axis=1)
        nrm = np.column_stack([d[:, 1], -d[:, 0]]) / elen[:, None]
        epts = pa[:, None, :] + EDGE_POINTS[None, :, None] * d[:, None, :]
        t1 = mesh.edge_tris[interior, 0]
        t2 = mesh.edge_tris[interior, 1]
        g1 = _element_grads_at(mesh, basis, u, t1, epts)
        g2 = _element_grads_at(mesh, basis, u, t2, epts)
        jump = np.einsum("nqa,na->nq", g1 - g2, nrm)
        line = elen * (jump ** 2 @ EDGE_WEIGHTS)
        np.add.at(eta2, t1, diam[t1] * line)
        np.add.at(eta2, t2, diam[t2] * line)

    # diam(T) |Phi + phi - dn u|^2 over boundary edges of dT
    tq, wq = _gauss01(8)
    xq = bg.quad_points(tq)
    grads = _element_grads_at(mesh, basis, u, bg.tri, xq)
    dnu = np.einsum("nqa,na->nq", grads, bg.nrm)
    r = phi[:, :1] * (1 - tq)[None, :] + phi[:, 1:] * tq[None, :] - dnu
    if data.Phi is not None:
        r = r + np.asarray(data.Phi(xq.reshape(-1, 2)), dtype=float).reshape(
            bg.n_panels, -1
        )
    flux = bg.h * (r ** 2 @ wq)
    np.add.at(eta2, bg.tri, diam[bg.tri] * flux)

    # diam(T) |d/ds ((1/2 - K)(U - u) - V phi)|^2 over boundary edges
    res = boundary_residual_derivative(sys, x, data)
    np.add.at(eta2, bg.tri, diam[bg.tri] * res ** 2)

    return EstimatorResult(per_element=np.sqrt(eta2))


# -- marking --------------------------------------------------------------------

def mark(est, theta, marking="linear"):
    """Minimal-cardinality set M with sum_M eta_T >= theta * sum eta_T
    (linear sums; marking='squared' uses eta_T^2 on both sides).  Sorted
    greedy selection is optimal for this criterion; ties break toward
    the lowest element id.  All-zero estimator gives the empty set."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    eta = est.per_element if isinstance(est, EstimatorResult) else np.asarray(est, float)
    if np.any(eta < 0):
        raise ValueError("estimator entries must be nonnegative")
    if marking not in ("linear", "squared"):
        raise ValueError(f"unknown marking mode {marking!r}")
    score = eta if marking == "linear" else eta ** 2
    total = float(score.sum())
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(score)), -score))
    csum = np.cumsum(score[order])
    k = int(np.searchsorted(csum, theta * total - 1e-12 * total)) + 1
    return np.sort(order[:k])


# -- adaptive loop ----------------------------------------------------------------

def adaptive_loop(root, data, cfg: AdaptiveConfig = None):
    """Solve -> Estimate -> Mark -> Refine (with grading enforcement)
    until the estimator vanishes or max_steps/max_dofs is reached."""
    cfg = cfg if cfg is not None else AdaptiveConfig()
    cfg.validate()
    gcfg = GradingConfig(d_grad=cfg.d_grad)
    mesh = enforce_grading(root, gcfg)
    record = AdaptiveRunRecord(config=cfg)
    max_dofs = np.inf if cfg.max_dofs is None else cfg.max_dofs
    while True:
        sys = assemble_coupled(mesh, data)
        x = solve(sys)
        est = estimate(sys, x, data)
        stop = (
            est.total == 0.0
            or record.n_steps >= cfg.max_steps
            or sys.dim >= max_dofs
        )
        marked = np.empty(0, dtype=np.int64) if stop else mark(
            est, cfg.theta, cfg.marking
        )
        record.append(mesh, x, est, marked, sys.dim)
        if marked.size == 0:
            return record
        mesh = enforce_grading(nvb_refine(mesh, marked), gcfg)
        if not grading_ok(mesh, gcfg):
            raise RuntimeError("grading enforcement failed")


# -- cross-mesh energy distance ----------------------------------------------------

def _volume_values_at(mesh, basis, u, elems, pts):
    """Values of the volume function at physical points pts (n, q, 2)
    inside the given elements (n,)."""
    coords = mesh.coords[mesh.tri[elems]]
    lam = _barycentric_in(coords, pts)
    N = shape_values(lam.reshape(-1, 3)).reshape(len(elems), -1, 7)
    return np.einsum("nqj,nj->nq", N, u[basis.elem_dofs[elems]])


def _host_panels(bg_c, bg_f):
    """Coarse panel index and endpoint parameters of every fine panel."""
    d = bg_c.pb - bg_c.pa
    h2 = np.einsum("na,na->n", d, d)
    mid = 0.5 * (bg_f.pa + bg_f.pb)
    s = np.einsum("ma,na->mn", mid, d) - np.einsum("na,na->n", bg_c.pa, d)
    s /= h2
    foot = bg_c.pa[None, :, :] + s[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(mid[:, None, :] - foot, axis=2)
    dist[(s < -1e-12) | (s > 1 + 1e-12)] = np.inf
    host = np.argmin(dist, axis=1)
    if not np.all(np.isfinite(dist[np.arange(len(host)), host])):
        raise ValueError("fine boundary panel has no host coarse panel")
    dh = d[host]
    sa = np.einsum("ma,ma->m", bg_f.pa - bg_c.pa[host], dh) / h2[host]
    sb = np.einsum("ma,ma->m", bg_f.pb - bg_c.pa[host], dh) / h2[host]
    return host, sa, sb


def x_distance(sys_c, x_c, sys_f, x_f):
    """Energy distance ||u_f - u_c||_X between coupled solutions on a
    mesh and one of its refinements (same refinement forest).

    The volume part is the full H1 norm of the difference, integrated
    elementwise on the fine mesh with the coarse function evaluated
    through the element genealogy.  The density part is the single-layer
    energy <V(phi_f - phi_c), phi_f - phi_c> with the coarse density
    prolonged onto the fine panels (the panel-wise P1 densities nest
    under refinement, unlike the volume spaces)."""
    mc, mf = sys_c.mesh, sys_f.mesh
    uc = np.asarray(x_c, dtype=float)[: sys_c.n1]
    uf = np.asarray(x_f, dtype=float)[: sys_f.n1]
    cset = set(int(e) for e in mc.element_ids)
    forest = mf.forest
    host = np.array(
        [mc.local_index(forest.ancestor_in(int(e), cset)) for e in mf.element_ids],
        dtype=np.int64,
    )
    pts = np.einsum("qa,nab->nqb", TRI_POINTS, mf.coords[mf.tri])
    elems_f = np.arange(mf.n_elements)
    dv = _volume_values_at(mf, sys_f.basis, uf, elems_f, pts) - _volume_values_at(
        mc, sys_c.basis, uc, host, pts
    )
    dg = _element_grads_at(mf, sys_f.basis, uf, elems_f, pts) - _element_grads_at(
        mc, sys_c.basis, uc, host, pts
    )
    dens = dv ** 2 + np.einsum("nqa,nqa->nq", dg, dg)
    h1 = float(mf.area @ (dens @ TRI_WEIGHTS))

    phic = sys_c.density_coeffs(np.asarray(x_c, dtype=float)[sys_c.n1 :])
    phif = sys_f.density_coeffs(np.asarray(x_f, dtype=float)[sys_f.n1 :])
    hostp, sa, sb = _host_panels(sys_c.bg, sys_f.bg)
    ca, cb = phic[hostp, 0], phic[hostp, 1]
    dphi = phif - np.column_stack([ca * (1 - sa) + cb * sa, ca * (1 - sb) + cb * sb])
    dphi = dphi.ravel()
    return float(np.sqrt(h1 + dphi @ sys_f.Vb @ dphi))


# -- hierarchical Galerkin system --------------------------------------------------

@dataclass
class _PanelArrays:
    """Flat view of several PanelSets: one row per panel with its owner
    function index and physical endpoints."""

    owner: np.ndarray  # (P,)
    pa: np.ndarray     # (P, 2)
    pb: np.ndarray     # (P, 2)
    h: np.ndarray      # (P,)
    seg: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    C: np.ndarray      # (P, 2) or (P, 3)

    @property
    def n(self):
        return len(self.owner)


def _collect_panels(bh, panel_sets, width):
    owner, seg, t0, t1, C = [], [], [], [], []
    for k, ps in enumerate(panel_sets):
        if ps is None:
            continue
        owner.append(np.full(len(ps.seg), k, dtype=np.int64))
        seg.append(np.asarray(ps.seg, dtype=np.int64))
        t0.append(np.asarray(ps.t0, dtype=float))
        t1.append(np.asarray(ps.t1, dtype=float))
        C.append(np.asarray(ps.C, dtype=float))
    if not owner:
        empty = np.empty(0)
        return _PanelArrays(
            np.empty(0, dtype=np.int64), np.empty((0, 2)), np.empty((0, 2)),
            empty, np.empty(0, dtype=np.int64), empty, empty,
            np.empty((0, width)),
        )
    owner = np.concatenate(owner)
    seg = np.concatenate(seg)
    t0 = np.concatenate(t0)
    t1 = np.concatenate(t1)
    C = np.concatenate(C, axis=0)
    qa = np.array([bh.segments[s][2] for s in seg])
    qb = np.array([bh.segments[s][3] for s in seg])
    pa = qa + t0[:, None] * (qb - qa)
    pb = qa + t1[:, None] * (qb - qa)
    h = np.linalg.norm(pb - pa, axis=1)
    return _PanelArrays(owner, pa, pb, h, seg, t0, t1, C)


def _v_blocks_batch(xa, xb, ya, yb, order):
    """(p, 2, 2) single-layer pairing blocks for panel pairs at a fixed
    outer Gauss order (well-separated pairs only)."""
    tq, wq = _gauss01(order)
    hx = np.linalg.norm(xb - xa, axis=1)
    x = xa[:, None, :] + tq[None, :, None] * (xb - xa)[:, None, :]
    h, t, n = _panel_frame(ya, yb)
    r = x - ya[:, None, :]
    u = np.einsum("pqa,pa->pq", r, t)
    d = np.einsum("pqa,pa->pq", r, n)
    mom = log_moments(h[:, None], u, d, nmom=2)
    pot = -(h[:, None] / TWO_PI) * np.stack([mom[0] - mom[1], mom[1]])
    phi = _p1_vals(tq)
    return hx[:, None, None] * np.einsum("mq,q,npq->pmn", phi, wq, pot)


def _k_blocks_batch(xa, xb, ya, yb, order):
    """(p, 2, 3) double-layer pairing blocks, same conventions."""
    tq, wq = _gauss01(order)
    hx = np.linalg.norm(xb - xa, axis=1)
    x = xa[:, None, :] + tq[None, :, None] * (xb - xa)[:, None, :]
    h, t, n = _panel_frame(ya, yb)
    r = x - ya[:, None, :]
    u = np.einsum("pqa,pa->pq", r, t)
    d = np.einsum("pqa,pa->pq", r, n)
    mom = cauchy_moments(h[:, None], u, d, nmom=3)
    pot = (1.0 / TWO_PI) * np.stack(
        [mom[0] - mom[1], mom[1], 4.0 * (mom[1] - mom[2])]
    )
    phi = _p1_vals(tq)
    return hx[:, None, None] * np.einsum("mq,q,npq->pmn", phi, wq, pot)


def _pair_distances(px: _PanelArrays, py: _PanelArrays):
    """Minimal endpoint distance (nx, ny) and pairwise max panel size."""
    D = None
    for P in (px.pa, px.pb):
        for Q in (py.pa, py.pb):
            dd = np.linalg.norm(P[:, None, :] - Q[None, :, :], axis=-1)
            D = dd if D is None else np.minimum(D, dd)
    hm = np.maximum(px.h[:, None], py.h[None, :])
    return D, hm


def _batched_pairing(px, py, out, pair_fn, batch_fn, pairs):
    """Accumulate C_x^T B C_y over the given panel pairs into out,
    batching well-separated pairs per Gauss order."""
    ii, jj = pairs
    if len(ii) == 0:
        return
    D = None
    for P in (px.pa[ii], px.pb[ii]):
        for Q in (py.pa[jj], py.pb[jj]):
            dd = np.linalg.norm(P - Q, axis=-1)
            D = dd if D is None else np.minimum(D, dd)
    hm = np.maximum(px.h[ii], py.h[jj])
    close = D < 0.3 * hm
    ratio = D / hm
    for i, j in zip(ii[close], jj[close]):
        B = pair_fn(px.pa[i], px.pb[i], py.pa[j], py.pb[j])
        out[px.owner[i], py.owner[j]] += px.C[i] @ B @ py.C[j]
    far = ~close
    for order, sel in (
        (20, far & (ratio < 1.0)),
        (12, far & (ratio >= 1.0) & (ratio < 3.0)),
        (6, far & (ratio >= 3.0)),
    ):
        if not np.any(sel):
            continue
        i, j = ii[sel], jj[sel]
        B = batch_fn(px.pa[i], px.pb[i], py.pa[j], py.pb[j], order)
        vals = np.einsum("pm,pmn,pn->p", px.C[i], B, py.C[j])
        np.add.at(out, (px.owner[i], py.owner[j]), vals)


def _v_gram(px: _PanelArrays, n_funcs):
    """Symmetric single-layer Gram matrix of P1 panel functions."""
    out = np.zeros((n_funcs, n_funcs))
    iu, ju = np.triu_indices(px.n)
    half = np.zeros_like(out)
    _batched_pairing(px, px, half, pair_v_block, _v_blocks_batch, (iu, ju))
    diag = np.zeros_like(out)
    _batched_pairing(
        px, px, diag, pair_v_block, _v_blocks_batch,
        (np.arange(px.n), np.arange(px.n)),
    )
    return half + half.T - diag


def _k_pairing(px: _PanelArrays, py: _PanelArrays, nx, ny):
    """(nx, ny) double-layer pairing <K g_j, psi_i> of P1 test functions
    (rows) against P2 trace functions (cols)."""
    out = np.zeros((nx, ny))
    if px.n == 0 or py.n == 0:
        return out
    ii, jj = np.meshgrid(np.arange(px.n), np.arange(py.n), indexing="ij")

    def kfn(pa, pb, qa, qb):
        return pair_k_block(pa, pb, qa, qb)

    _batched_pairing(px, py, out, kfn, _k_blocks_batch, (ii.ravel(), jj.ravel()))
    return out


def _mass_pairing(bh, px: _PanelArrays, py: _PanelArrays, nx, ny):
    """(nx, ny) L2(Gamma) pairing of P1 rows against P2 columns; only
    panels on the same straight boundary segment can overlap."""
    out = np.zeros((nx, ny))
    for s in range(len(bh.segments)):
        xi = np.nonzero(px.seg == s)[0]
        yi = np.nonzero(py.seg == s)[0]
        if len(xi) == 0 or len(yi) == 0:
            continue
        ov = (px.t0[xi][:, None] < py.t1[yi][None, :] - 1e-14) & (
            py.t0[yi][None, :] < px.t1[xi][:, None] - 1e-14
        )
        for a, b in zip(*np.nonzero(ov)):
            i, j = xi[a], yi[b]
            B = pair_mass_block(px.pa[i], px.pb[i], py.pa[j], py.pb[j], ny=3)
            out[px.owner[i], py.owner[j]] += px.C[i] @ B @ py.C[j]
    return out


@dataclass
class HierGalerkin:
    """Galerkin matrix, energy Gram matrix, and load vector of the
    coupled form in the hierarchical basis, ordered so that the first
    n_l[j] indices span the step-j trial space.

    The Gram matrix realizes the product energy norm: full H1 inner
    product on the volume parts plus the single-layer energy on the
    density parts."""

    hb: object
    M: np.ndarray
    G: np.ndarray
    f: np.ndarray
    g: np.ndarray
    kind: np.ndarray    # 'volume' | 'density' per index
    level: np.ndarray
    step: np.ndarray
    n_l: list

    @property
    def dim(self):
        return len(self.f)

    def section_solutions(self):
        """(steps, dim) zero-padded solutions of the leading sections."""
        return section_solutions(self.M, self.f, self.n_l)


def _hier_scale_check(bh):
    pts = np.array([s[2] for s in bh.segments] + [s[3] for s in bh.segments])
    diam = 0.0
    for i in range(len(pts)):
        diam = max(diam, float(np.linalg.norm(pts - pts[i], axis=1).max()))
    if diam >= 1.0:
        raise ValueError(
            f"domain diameter {diam:.3g} >= 1: rescale so diam <= 1/2 "
            "before single-layer assembly"
        )


def _volume_load(forest, func, F):
    coords, area, _ = elem_geometry(forest, func.elems.eids)
    pts = np.einsum("qa,nab->nqb", TRI_POINTS, coords)
    vals = np.asarray(F(pts.reshape(-1, 2)), dtype=float).reshape(len(area), -1)
    N = shape_values(TRI_POINTS)
    return float(
        np.einsum("nq,q,qj,nj,n->", vals, TRI_WEIGHTS, N, func.elems.C, area)
    )


def _trace_load(bh, ps: PanelSet, Phi):
    tq, wq = _gauss01(8)
    total = 0.0
    for i in range(len(ps.seg)):
        _, _, qa, qb, ln = bh.segments[int(ps.seg[i])]
        t = ps.t0[i] + (ps.t1[i] - ps.t0[i]) * tq
        x = qa[None, :] + t[:, None] * (qb - qa)[None, :]
        vals = np.asarray(Phi(x), dtype=float)
        chi = _p2_vals(tq).T @ ps.C[i]
        total += float(np.sum(wq * vals * chi)) * (ps.t1[i] - ps.t0[i]) * ln
    return total


def _u_panelset(bh, final_mesh, U):
    """P2 interpolation of the trace jump U on the finest boundary,
    as a PanelSet in segment coordinates."""
    bg = boundary_geom(final_mesh)
    Uc = panel_p2_interp(bg, U)
    seg, t0, t1 = [], [], []
    for i in range(bg.n_panels):
        ga = int(final_mesh.vert_ids[bg.va[i]])
        gb = int(final_mesh.vert_ids[bg.vb[i]])
        s = bh.edge_segment(ga, gb)
        if s is None:
            raise RuntimeError("boundary panel not hosted by a root segment")
        ta, tb = bh.param(ga, s), bh.param(gb, s)
        if tb <= ta:
            raise RuntimeError("boundary panel is reversed against its segment")
        seg.append(s)
        t0.append(ta)
        t1.append(tb)
    return PanelSet(
        seg=np.asarray(seg, dtype=np.int64),
        t0=np.asarray(t0), t1=np.asarray(t1), C=Uc,
    )


def assemble_hierarchical(hb, data, final_mesh):
    """Assemble the coupled Galerkin matrix, the energy Gram matrix, and
    the load vector over the hierarchical basis sections.

    The stabilization weight is the constant 1/|Gamma| regardless of
    data.xi: the weight changes neither the solutions nor the energy
    norms, and the constant pairs with the closed-form panel blocks."""
    forest, bh = hb.forest, hb.boundary
    _hier_scale_check(bh)
    N = len(hb.order)
    pos = {key: i for i, key in enumerate(hb.order)}
    vrows = [(pos[("volume", j)], hb.volume[j]) for _, j in
             [k for k in hb.order if k[0] == "volume"]]
    drows = [(pos[("density", j)], hb.density[j]) for _, j in
             [k for k in hb.order if k[0] == "density"]]
    nv, nd = len(vrows), len(drows)

    M = np.zeros((N, N))
    G = np.zeros((N, N))
    f = np.zeros(N)

    # volume-volume: H1 stiffness into M, full H1 inner product into G.
    # Every function is piecewise polynomial on the final mesh, so each
    # pairing is a quadrature-exact sum over shared final elements; the
    # whole block is two sparse Gram products instead of a pair loop.
    eids = np.asarray(final_mesh.element_ids, dtype=np.int64)
    covers = {}
    for t, e in enumerate(eids):
        c = int(e)
        while c >= 0:
            covers.setdefault(c, []).append(t)
            c = forest.elem_parent[c]
    _, area_f, _ = elem_geometry(forest, eids)
    wts = np.sqrt(TRI_WEIGHTS[None, :] * area_f[:, None])  # (Nf, q)
    nq = len(TRI_WEIGHTS)
    data_v, data_x, data_y, indices, indptr = [], [], [], [], [0]
    for _, w in vrows:
        tsel = np.unique(
            np.concatenate(
                [covers.get(int(e), []) for e in w.elems.eids] or [[]]
            ).astype(np.int64)
        )
        sub = eids[tsel]
        vals = values_on(forest, w.elems, sub, TRI_POINTS) * wts[tsel]
        grads = gradients_on(forest, w.elems, sub, TRI_POINTS)
        grads *= wts[tsel][:, :, None]
        cols = (tsel[:, None] * nq + np.arange(nq)[None, :]).ravel()
        indices.append(cols)
        data_v.append(vals.ravel())
        data_x.append(grads[:, :, 0].ravel())
        data_y.append(grads[:, :, 1].ravel())
        indptr.append(indptr[-1] + len(cols))
    shape = (nv, len(eids) * nq)
    indices = np.concatenate(indices) if indices else np.empty(0, np.int64)
    indptr = np.array(indptr)

    def gram(chunks):
        W = sp.csr_matrix((np.concatenate(chunks), indices, indptr), shape=shape)
        S = (W @ W.T).tocoo()
        return S

    vpos = np.array([ia for ia, _ in vrows], dtype=np.int64)
    Sx = gram(data_x)
    Sy = gram(data_y)
    Sv = gram(data_v)
    # exact symmetry, as entries enter both triangles independently
    for S in (Sx, Sy, Sv):
        S.sum_duplicates()
    stiff = sp.coo_matrix((Sx.data, (Sx.row, Sx.col)), shape=(nv, nv))
    stiff = stiff + sp.coo_matrix((Sy.data, (Sy.row, Sy.col)), shape=(nv, nv))
    stiff = (0.5 * (stiff + stiff.T)).tocoo()
    mass = sp.coo_matrix((Sv.data, (Sv.row, Sv.col)), shape=(nv, nv))
    mass = (0.5 * (mass + mass.T)).tocoo()
    M[vpos[stiff.row], vpos[stiff.col]] = stiff.data
    G[vpos[stiff.row], vpos[stiff.col]] = stiff.data
    G[vpos[mass.row], vpos[mass.col]] += mass.data

    # boundary panels: all densities plus the constant weight xi as an
    # extra row; all traces plus the interpolated jump U as extra columns
    length = sum(s[4] for s in bh.segments)
    xi_ps = PanelSet(
        seg=np.arange(len(bh.segments), dtype=np.int64),
        t0=np.zeros(len(bh.segments)),
        t1=np.ones(len(bh.segments)),
        C=np.full((len(bh.segments), 2), 1.0 / length),
    )
    tmap = {t.label: i for i, t in enumerate(hb.trace)}
    vol_trace = [
        hb.trace[tmap[("trace",) + w.label]].panels
        if ("trace",) + w.label in tmap else None
        for _, w in vrows
    ]
    u_ps = _u_panelset(bh, final_mesh, data.U) if data.U is not None else None

    rows = _collect_panels(bh, [w.panels for _, w in drows] + [xi_ps], 2)
    cols = _collect_panels(bh, vol_trace + [u_ps], 3)

    VG = _v_gram(rows, nd + 1)
    ncol = nv + 1
    KM = _k_pairing(rows, cols, nd + 1, ncol)
    MM = _mass_pairing(bh, rows, cols, nd + 1, ncol)
    half_minus_k = 0.5 * MM - KM

    # rank-1 stabilization vector g_i = <xi, (1/2 - K) u_i + V phi_i>
    g = np.zeros(N)
    for a, (ia, _) in enumerate(vrows):
        g[ia] = half_minus_k[nd, a]
    for a, (ia, _) in enumerate(drows):
        g[ia] = VG[nd, a]

    for a, (ia, _) in enumerate(drows):
        for b, (ib, _) in enumerate(drows):
            M[ia, ib] = VG[a, b]
            G[ia, ib] = VG[a, b]
        for b, (ib, _) in enumerate(vrows):
            M[ia, ib] = half_minus_k[a, b]
            M[ib, ia] = -MM[a, b]
    M += np.outer(g, g)

    # load vector <F, v> + <Phi, v> + <psi, (1/2 - K) U> + rank-1 part
    for a, (ia, w) in enumerate(vrows):
        if data.F is not None:
            f[ia] += _volume_load(forest, w, data.F)
        if data.Phi is not None and vol_trace[a] is not None:
            f[ia] += _trace_load(bh, vol_trace[a], data.Phi)
    if u_ps is not None:
        for a, (ia, _) in enumerate(drows):
            f[ia] += half_minus_k[a, nv]
        f += half_minus_k[nd, nv] * g

    kind = np.array([k for k, _ in hb.order])
    level = np.array(
        [
            (hb.volume[j] if k == "volume" else hb.density[j]).level
            for k, j in hb.order
        ],
        dtype=np.int64,
    )
    step = np.array(
        [
            (hb.volume[j] if k == "volume" else hb.density[j]).step
            for k, j in hb.order
        ],
        dtype=np.int64,
    )
    return HierGalerkin(
        hb=hb, M=M, G=G, f=f, g=g, kind=kind, level=level, step=step,
        n_l=list(hb.n_l),
    )


# -- energy bookkeeping -----------------------------------------------------------

def section_solutions(M, f, sizes):
    """Zero-padded Galerkin solutions of the leading n x n sections."""
    N = len(f)
    out = np.zeros((len(sizes), N))
    for i, n in enumerate(sizes):
        out[i, :n] = _dense_solve(M[:n, :n], f[:n])
    return out


def increment_energies(sols, G):
    """|u_{k+1} - u_k|_G^2 for consecutive section solutions."""
    d = np.diff(sols, axis=0)
    return np.einsum("ka,ab,kb->k", d, G, d)


def reference_errors(sols, G):
    """|u_ref - u_k|_G^2 against the last (finest) solution."""
    d = sols[-1][None, :] - sols
    return np.einsum("ka,ab,kb->k", d, G, d)


def qo_ratios(increments, ref_errors, rel_floor=1e-12):
    """Q(l) = sum_{k >= l} |u_{k+1} - u_k|^2 / |u_ref - u_l|^2 for every
    step l whose reference error is above the relative floor."""
    tails = np.cumsum(increments[::-1])[::-1]
    scale = ref_errors[0] if len(ref_errors) else 1.0
    out = np.full(len(increments), np.nan)
    for l in range(len(increments)):
        if ref_errors[l] > rel_floor * scale:
            out[l] = tails[l] / ref_errors[l]
    return out


def energy_norms(record: AdaptiveRunRecord, hs: HierGalerkin):
    """Fill the run record with increment energies and reference errors
    computed from the hierarchical section solutions."""
    if hs.hb.steps != record.n_steps:
        raise RuntimeError(
            f"hierarchical basis covers {hs.hb.steps} steps, "
            f"record has {record.n_steps}"
        )
    if any(b <= a for a, b in zip(hs.n_l, hs.n_l[1:])):
        raise RuntimeError("section sizes are not strictly increasing")
    sols = hs.section_solutions()
    record.increments = increment_energies(sols, hs.G)
    record.ref_errors = reference_errors(sols, hs.G)
    return record.increments, record.ref_errors
