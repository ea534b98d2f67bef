"""FEM stiffness, boundary integral operators, and the coupled system.

The boundary integrals use closed-form primitives for the log and
Cauchy kernels over straight panels: the inner integral of every
Galerkin entry and every potential evaluation is analytic, the outer
integral uses Gauss quadrature with distance-adaptive order and dyadic
grading toward shared endpoints.  Panels from different levels of the
hierarchical machinery may overlap; collinear overlapping pairs are
split at the finer panel's endpoints so each piece is either identical
(closed-form double integral) or disjoint.

Conventions: boundary traversed counterclockwise, domain on the left,
outward normal n = (t_y, -t_x) for unit tangent t.  Densities are
discontinuous P1 per panel (basis 1-s, s), traces are continuous P2
per panel (endpoint values plus a sup-normalized edge bubble).  Under
these conventions (1/2 - K)1 = 1 on the boundary.

The geometry must satisfy diam(Omega) <= 1/2 before single-layer
assembly (callers rescale): the single-layer operator on a contour of
logarithmic capacity >= 1 loses positive definiteness.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .quadrature import TRI_POINTS, TRI_WEIGHTS
from .spaces import shape_values, S2PlusBasis

__all__ = [
    "BoundaryGeom",
    "CoupledProblemData",
    "CoupledSystem",
    "PotentialEvaluator",
    "boundary_geom",
    "assemble_fem",
    "assemble_V",
    "assemble_K_panels",
    "assemble_K",
    "assemble_mass_C",
    "assemble_coupled",
    "boundary_residual_derivative",
    "pair_v_block",
    "pair_k_block",
    "pair_mass_block",
    "panel_p2_interp",
    "dump_matrix",
    "min_symmetric_eig",
]

TWO_PI = 2.0 * np.pi

# exact values of int_0^1 int_0^1 t^a s^b log|t-s| ds dt
_LOG_SELF = np.array([[-3.0 / 2.0, -3.0 / 4.0], [-3.0 / 4.0, -7.0 / 16.0]])


@lru_cache(maxsize=None)
def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _graded01(toward0, toward1, levels=12, order=6):
    """Composite Gauss nodes on [0,1], dyadically graded toward the
    flagged endpoints, for integrands with endpoint log blow-up."""
    t0, w0 = _gauss01(order)

    def toward_zero(a, b):
        pts, wts = [], []
        hi = b
        for j in range(levels):
            lo = a + (b - a) * 2.0 ** (-(j + 1))
            if j == levels - 1:
                lo = a
            pts.append(lo + (hi - lo) * t0)
            wts.append((hi - lo) * w0)
            hi = lo
        return np.concatenate(pts), np.concatenate(wts)

    if toward0 and toward1:
        pa, wa = toward_zero(0.0, 0.5)
        return np.concatenate([pa, 1.0 - pa]), np.concatenate([wa, wa])
    if toward0:
        return toward_zero(0.0, 1.0)
    if toward1:
        p, w = toward_zero(0.0, 1.0)
        return 1.0 - p, w
    return _gauss01(16)


# -- closed-form primitives --------------------------------------------------
# Local panel coordinates: y(s) = pa + s (pb - pa), s in [0,1], h = |pb-pa|,
# u = (x - pa).t, d = (x - pa).n, w = h s - u, Q = w^2 + d^2.

def _datan(w, d):
    """d * atan(w/d) with the continuous value 0 at d = 0."""
    w, d = np.broadcast_arrays(w, d)
    out = np.zeros(w.shape)
    m = d != 0
    if np.any(m):
        out[m] = d[m] * np.arctan(w[m] / d[m])
    return out


def _lnQ(w, d):
    Q = np.asarray(w * w + d * d, dtype=float)
    out = np.full(Q.shape, -1500.0)  # harmless stand-in for log 0
    m = Q > 0
    out[m] = np.log(Q[m])
    return out


def log_moments(h, u, d, nmom=2):
    """moments[m] = int_0^1 s^m log|x - y(s)| ds, closed form.

    The primitives below integrate w^k log|x-y| = w^k (1/2) log Q in w."""
    w0, w1 = -u, h - u
    lQ0, lQ1 = _lnQ(w0, d), _lnQ(w1, d)

    def F(w, lQ):
        return 0.5 * w * lQ - w + _datan(w, d)

    def G(w, lQ):
        return 0.25 * ((w * w + d * d) * lQ - w * w)

    def H(w, lQ):
        return (w**3 / 6.0) * lQ - (w**3 / 3.0 - d * d * w) / 3.0 \
            - d * d * _datan(w, d) / 3.0

    Fv = F(w1, lQ1) - F(w0, lQ0)
    out = [Fv / h]
    if nmom > 1:
        Gv = G(w1, lQ1) - G(w0, lQ0)
        out.append((Gv + u * Fv) / h**2)
    if nmom > 2:
        Hv = H(w1, lQ1) - H(w0, lQ0)
        out.append((Hv + 2 * u * Gv + u * u * Fv) / h**3)
    return np.stack(out)


def cauchy_moments(h, u, d, nmom=3):
    """moments[m] = int s^m d/Q dw over the panel (w from -u to h-u).

    This is the double-layer kernel pairing: (K g)(x) picks up 1/(2 pi)
    times the coefficient combination of these moments.  Identically
    zero for x on the panel's own line (d = 0)."""
    w0, w1 = -u, h - u
    at = _datan(w1, d) - _datan(w0, d)  # equals d * (atan difference)
    dn = np.broadcast_arrays(d, u)[0]
    P0 = np.divide(at, dn, out=np.zeros(at.shape), where=(dn != 0))
    out = [P0]
    if nmom > 1:
        P1 = 0.5 * d * (_lnQ(w1, d) - _lnQ(w0, d))
        out.append((P1 + u * P0) / h)
    if nmom > 2:
        P2 = d * (w1 - w0) - d * d * P0
        out.append((P2 + 2 * u * P1 + u * u * P0) / h**2)
    return np.stack(out)


def gradlog_moments(h, u, d, nmom=2):
    """moments[m] = int s^m w/Q dw (tangential part of the grad-log
    kernel).  Valid as a principal value for d = 0 with x inside the
    panel, provided x is not a panel endpoint."""
    w0, w1 = -u, h - u
    Q0m = 0.5 * (_lnQ(w1, d) - _lnQ(w0, d))
    out = [Q0m]
    if nmom > 1:
        Q1 = (w1 - w0) - (_datan(w1, d) - _datan(w0, d))
        out.append((Q1 + u * Q0m) / h)
    if nmom > 2:
        Q2 = 0.5 * (w1 * w1 - w0 * w0) - d * d * Q0m
        out.append((Q2 + 2 * u * Q1 + u * u * Q0m) / h**2)
    return np.stack(out)


def dcauchy_moments(h, u, d, du, dd, nmom=3):
    """moments[m] = int s^m  d/de[ d/Q ] dw for x moving along a unit
    direction e with components du = e.t, dd = e.n:

        d/de [d/Q] = dd/Q + (2 d w du - 2 d^2 dd)/Q^2.

    Only valid off the panel's line (d != 0) or for motion along the
    line (d = 0 and dd = 0, where every term vanishes)."""
    w0, w1 = -u, h - u
    Q0, Q1 = w0 * w0 + d * d, w1 * w1 + d * d
    dn = np.broadcast_arrays(d, u, du, dd, h)[0].astype(float)
    ok = dn != 0
    z = np.zeros(dn.shape)
    at = _datan(w1, d) - _datan(w0, d)  # d * (atan difference)
    # A_k = int w^k/Q dw
    A0 = np.divide(at, dn * dn, out=z.copy(), where=ok)
    A1 = 0.5 * (_lnQ(w1, d) - _lnQ(w0, d))
    A2 = (w1 - w0) - at
    # B_k = int w^k/Q^2 dw
    B0 = np.divide(
        w1 / (2.0 * Q1) - w0 / (2.0 * Q0) + 0.5 * at / np.where(ok, dn * dn, 1.0),
        dn * dn,
        out=z.copy(),
        where=ok,
    )
    B1 = 0.5 / Q0 - 0.5 / Q1
    B2 = A0 - d * d * B0
    B3 = A1 - d * d * B1
    A = (A0, A1, A2)
    B = (B0, B1, B2, B3)
    raw = [
        dd * A[k] + 2.0 * d * du * B[k + 1] - 2.0 * d * d * dd * B[k]
        for k in range(min(nmom, 3))
    ]
    out = [raw[0]]
    if nmom > 1:
        out.append((raw[1] + u * raw[0]) / h)
    if nmom > 2:
        out.append((raw[2] + 2 * u * raw[1] + u * u * raw[0]) / h**2)
    return np.stack(out)


def _panel_frame(pa, pb):
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    dv = pb - pa
    h = np.linalg.norm(dv, axis=-1)
    t = dv / h[..., None]
    n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    return h, t, n


# -- per-pair Galerkin blocks ------------------------------------------------

def _p1_vals(s):
    return np.stack([1.0 - s, s])


def _p2_vals(s):
    return np.stack([1.0 - s, s, 4.0 * s * (1.0 - s)])


def _p2_dvals(s):
    return np.stack([-np.ones_like(s), np.ones_like(s), 4.0 - 8.0 * s])


def _collinear_overlap(pax, pbx, pay, pby):
    """Parameters (a0, a1) of panel y in panel x's chart when the two
    panels are collinear and overlap on positive length, else None."""
    hx, t, n = _panel_frame(pax, pbx)
    hy = float(np.linalg.norm(pby - pay))
    tol = 1e-12 * max(float(hx), hy)
    if abs(float(np.dot(pay - pax, n))) > tol or abs(float(np.dot(pby - pax, n))) > tol:
        return None
    a0 = float(np.dot(pay - pax, t)) / float(hx)
    a1 = float(np.dot(pby - pax, t)) / float(hx)
    lo, hi = min(a0, a1), max(a0, a1)
    if min(hi, 1.0) - max(lo, 0.0) <= 1e-12:
        return None
    return a0, a1


def _collinear(pax, pbx, pay, pby):
    hx, t, n = _panel_frame(pax, pbx)
    hy = float(np.linalg.norm(pby - pay))
    tol = 1e-12 * max(float(hx), hy)
    return (
        abs(float(np.dot(pay - pax, n))) <= tol
        and abs(float(np.dot(pby - pax, n))) <= tol
    )


def _restrict_p1(a, b):
    """R[k, m]: parent P1 shape m on the piece [a, b] in piece shapes k."""
    return np.array([[1.0 - a, 1.0 - b], [a, b]])


def _identical(pax, pbx, pay, pby, h):
    tol = 1e-12 * h
    if np.linalg.norm(pax - pay) < tol and np.linalg.norm(pbx - pby) < tol:
        return 1
    if np.linalg.norm(pax - pby) < tol and np.linalg.norm(pbx - pay) < tol:
        return -1
    return 0


def _self_v_block(h):
    """2x2 block of <V phi_n, phi_m> on a single panel of length h."""
    # log|x - y| = log h + log|t - s|; convert the monomial-basis
    # constants to the nodal P1 shapes via (1-t, t) = T columns
    T = np.array([[1.0, 0.0], [-1.0, 1.0]])  # rows: power of t
    # product integrals int t^a dt * int s^b ds for the log h part
    mono_mass = np.array([[1.0, 0.5], [0.5, 0.25]])
    B = T.T @ (np.log(h) * mono_mass + _LOG_SELF) @ T
    return -(h * h / TWO_PI) * B


def _endpoint_dist(pax, pbx, pay, pby):
    return float(
        min(
            np.linalg.norm(pax - pay), np.linalg.norm(pax - pby),
            np.linalg.norm(pbx - pay), np.linalg.norm(pbx - pby),
        )
    )


def _outer_rule(pax, pbx, pay, pby, hx, hy):
    """Quadrature on panel x adapted to the position of panel y."""
    tol = 1e-12 * max(hx, hy)
    near0 = min(np.linalg.norm(pax - pay), np.linalg.norm(pax - pby)) < 0.3 * hx + tol
    near1 = min(np.linalg.norm(pbx - pay), np.linalg.norm(pbx - pby)) < 0.3 * hx + tol
    if near0 or near1:
        return _graded01(bool(near0), bool(near1))
    r = _endpoint_dist(pax, pbx, pay, pby) / max(hx, hy)
    return _gauss01(20 if r < 1 else (12 if r < 3 else 6))


def pair_v_block(pax, pbx, pay, pby):
    """(2, 2) block B[m, n] = <V phi_n^y, phi_m^x> of the single-layer
    pairing between two straight panels with nodal P1 shapes."""
    pax, pbx = np.asarray(pax, float), np.asarray(pbx, float)
    pay, pby = np.asarray(pay, float), np.asarray(pby, float)
    hx = float(np.linalg.norm(pbx - pax))
    hy = float(np.linalg.norm(pby - pay))
    sign = _identical(pax, pbx, pay, pby, max(hx, hy))
    if sign:
        B = _self_v_block(hx)
        if sign < 0:
            B = B[:, ::-1]
        return B
    ov = _collinear_overlap(pax, pbx, pay, pby)
    if ov is not None:
        if hx < hy:
            return pair_v_block(pay, pby, pax, pbx).T
        # split the coarser panel x at y's endpoints; each piece is
        # then identical to y or disjoint from it
        a0, a1 = ov
        cuts = sorted({0.0, 1.0, min(max(a0, 0.0), 1.0), min(max(a1, 0.0), 1.0)})
        B = np.zeros((2, 2))
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi - lo < 1e-12:
                continue
            qa = pax + lo * (pbx - pax)
            qb = pax + hi * (pbx - pax)
            B += _restrict_p1(lo, hi) @ pair_v_block(qa, qb, pay, pby)
        return B
    tq, wq = _outer_rule(pax, pbx, pay, pby, hx, hy)
    x = pax + tq[:, None] * (pbx - pax)
    h, t, n = _panel_frame(pay, pby)
    r = x - pay
    u, d = r @ t, r @ n
    mom = log_moments(h, u, d, nmom=2)  # (2, nq)
    pot = -(h / TWO_PI) * np.stack([mom[0] - mom[1], mom[1]])
    phi = _p1_vals(tq)
    return hx * np.einsum("mq,q,nq->mn", phi, wq, pot)


def pair_k_block(pax, pbx, pay, pby):
    """(2, 3) block B[m, n] = <K chi_n^y, phi_m^x>: double-layer pairing
    of the P2 trace shapes on panel y against the P1 shapes on panel x.
    The 1/2 identity part is NOT included.  Zero for collinear panels
    since the kernel vanishes on the panel's own line."""
    pax, pbx = np.asarray(pax, float), np.asarray(pbx, float)
    pay, pby = np.asarray(pay, float), np.asarray(pby, float)
    hx = float(np.linalg.norm(pbx - pax))
    hy = float(np.linalg.norm(pby - pay))
    if _collinear(pax, pbx, pay, pby):
        return np.zeros((2, 3))
    tq, wq = _outer_rule(pax, pbx, pay, pby, hx, hy)
    x = pax + tq[:, None] * (pbx - pax)
    h, t, n = _panel_frame(pay, pby)
    r = x - pay
    u, d = r @ t, r @ n
    mom = cauchy_moments(h, u, d, nmom=3)  # (3, nq) of s^m moments
    pot = (1.0 / TWO_PI) * np.stack(
        [mom[0] - mom[1], mom[1], 4.0 * (mom[1] - mom[2])]
    )
    phi = _p1_vals(tq)
    return hx * np.einsum("mq,q,nq->mn", phi, wq, pot)


def pair_mass_block(pax, pbx, pay, pby, ny=3):
    """(2, ny) overlap mass block <chi_n^y, phi_m^x> for collinear
    overlapping panels (zero otherwise)."""
    pax, pbx = np.asarray(pax, float), np.asarray(pbx, float)
    pay, pby = np.asarray(pay, float), np.asarray(pby, float)
    ov = _collinear_overlap(pax, pbx, pay, pby)
    if ov is None:
        return np.zeros((2, ny))
    a0, a1 = ov
    lo = max(min(a0, a1), 0.0)
    hi = min(max(a0, a1), 1.0)
    hx = float(np.linalg.norm(pbx - pax))
    tq, wq = _gauss01(4)
    s = lo + (hi - lo) * tq
    sy = (s - a0) / (a1 - a0)
    phix = _p1_vals(s)
    phiy = _p2_vals(sy) if ny == 3 else _p1_vals(sy)
    return hx * (hi - lo) * np.einsum("mq,q,nq->mn", phix, wq, phiy)


# -- boundary geometry -------------------------------------------------------

@dataclass
class BoundaryGeom:
    """Boundary panels of a mesh in CCW loop order."""

    mesh: object
    va: np.ndarray       # (n,) start vertex (local index)
    vb: np.ndarray       # (n,) end vertex
    edge_ids: np.ndarray
    tri: np.ndarray      # adjacent element per panel
    pa: np.ndarray       # (n, 2)
    pb: np.ndarray       # (n, 2)
    h: np.ndarray
    tang: np.ndarray     # (n, 2) unit, CCW direction
    nrm: np.ndarray      # (n, 2) outward

    @property
    def n_panels(self):
        return len(self.h)

    @property
    def length(self):
        return float(self.h.sum())

    def trace_dofs(self, basis):
        """(n, 3) volume dof indices per panel: hat at the start vertex,
        hat at the end vertex, edge bubble."""
        return np.column_stack(
            [self.va, self.vb, basis.n_hat + self.edge_ids]
        ).astype(np.int64)

    def quad_points(self, tq):
        """(n, nq, 2) physical points at panel parameters tq."""
        return self.pa[:, None, :] + np.asarray(tq)[None, :, None] * (
            self.pb - self.pa
        )[:, None, :]


def boundary_geom(mesh):
    be = mesh.boundary_edges
    pa = mesh.coords[be[:, 0]]
    pb = mesh.coords[be[:, 1]]
    # shoelace over all loops: CCW traversal with the domain on the left
    # has positive total signed area
    if float(np.sum(pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0])) <= 0.0:
        raise ValueError("boundary orientation is not counterclockwise")
    h, t, n = _panel_frame(pa, pb)
    return BoundaryGeom(
        mesh=mesh, va=be[:, 0].copy(), vb=be[:, 1].copy(),
        edge_ids=mesh.boundary_edge_ids.copy(), tri=mesh.boundary_tri.copy(),
        pa=pa, pb=pb, h=h, tang=t, nrm=n,
    )


def _check_scale(bg):
    pts = np.unique(np.concatenate([bg.pa, bg.pb]), axis=0)
    diam = 0.0
    for i in range(len(pts)):
        diam = max(diam, float(np.linalg.norm(pts - pts[i], axis=1).max()))
    if diam >= 1.0:
        raise ValueError(
            f"domain diameter {diam:.3g} >= 1: rescale so diam <= 1/2 "
            "before single-layer assembly"
        )
    return diam


def _pair_classes(bg):
    """Classify all panel pairs at once: close pairs get individual
    graded quadrature, far pairs are batched per Gauss order.  Returns
    (close_mask, order_matrix, collinear_mask), all (n, n) with [i, j]
    describing source panel j relative to target panel i."""
    def dm(P, Q):
        return np.linalg.norm(P[:, None, :] - Q[None, :, :], axis=-1)

    D = np.minimum.reduce(
        [dm(bg.pa, bg.pa), dm(bg.pa, bg.pb), dm(bg.pb, bg.pa), dm(bg.pb, bg.pb)]
    )
    hm = np.maximum(bg.h[:, None], bg.h[None, :])
    close = D < 0.3 * hm + 1e-12 * hm
    with np.errstate(invalid="ignore"):
        r = D / hm
    order = np.where(r < 1, 20, np.where(r < 3, 12, 6))
    base = np.einsum("ia,ia->i", bg.pa, bg.nrm)[:, None]
    offa = np.einsum("ja,ia->ij", bg.pa, bg.nrm) - base
    offb = np.einsum("ja,ia->ij", bg.pb, bg.nrm) - base
    coll = (np.abs(offa) <= 1e-12 * hm) & (np.abs(offb) <= 1e-12 * hm)
    return close, order, coll


# -- block assemblers --------------------------------------------------------

def assemble_fem(mesh, basis):
    """Sparse H1 stiffness matrix of the volume space."""
    K, _ = basis.local_matrices()
    return basis.assemble(K)


def assemble_V(bg):
    """Dense single-layer Galerkin matrix over discontinuous P1 panels.

    Dof 2i is the shape 1-s on panel i, dof 2i+1 is the shape s."""
    _check_scale(bg)
    n = bg.n_panels
    V = np.zeros((2 * n, 2 * n))
    close, order, _ = _pair_classes(bg)
    for i in range(n):
        V[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = _self_v_block(float(bg.h[i]))
    ii, jj = np.nonzero(np.tril(close, k=-1))
    for i, j in zip(ii, jj):
        B = pair_v_block(bg.pa[i], bg.pb[i], bg.pa[j], bg.pb[j])
        V[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = B
        V[2 * j : 2 * j + 2, 2 * i : 2 * i + 2] = B.T
    low = np.tril(~close, k=-1)
    for o in (6, 12, 20):
        ii, jj = np.nonzero(low & (order == o))
        if len(ii) == 0:
            continue
        B = _v_far_blocks(bg, ii, jj, o)
        for k, (i, j) in enumerate(zip(ii, jj)):
            V[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = B[k]
            V[2 * j : 2 * j + 2, 2 * i : 2 * i + 2] = B[k].T
    return V


def _v_far_blocks(bg, ii, jj, order):
    """Vectorized <V phi^j, phi^i> blocks for well-separated pairs."""
    tq, wq = _gauss01(order)
    x = bg.pa[ii][:, None, :] + tq[None, :, None] * (bg.pb[ii] - bg.pa[ii])[:, None, :]
    h = bg.h[jj][:, None]
    r = x - bg.pa[jj][:, None, :]
    u = np.einsum("pqa,pa->pq", r, bg.tang[jj])
    d = np.einsum("pqa,pa->pq", r, bg.nrm[jj])
    mom = log_moments(h, u, d, nmom=2)  # (2, npair, nq)
    pot = -(h / TWO_PI) * np.stack([mom[0] - mom[1], mom[1]])
    phi = _p1_vals(tq)
    return np.einsum("mq,q,npq,p->pmn", phi, wq, pot, bg.h[ii])


def _k_far_blocks(bg, ii, jj, order):
    tq, wq = _gauss01(order)
    x = bg.pa[ii][:, None, :] + tq[None, :, None] * (bg.pb[ii] - bg.pa[ii])[:, None, :]
    h = bg.h[jj][:, None]
    r = x - bg.pa[jj][:, None, :]
    u = np.einsum("pqa,pa->pq", r, bg.tang[jj])
    d = np.einsum("pqa,pa->pq", r, bg.nrm[jj])
    mom = cauchy_moments(h, u, d, nmom=3)
    pot = (1.0 / TWO_PI) * np.stack(
        [mom[0] - mom[1], mom[1], 4.0 * (mom[1] - mom[2])]
    )
    phi = _p1_vals(tq)
    return np.einsum("mq,q,npq,p->pmn", phi, wq, pot, bg.h[ii])


def assemble_K_panels(bg):
    """(2n, 3n) double-layer matrix pairing per-panel P2 trace
    coefficients against the P1 density shapes (no 1/2 identity)."""
    n = bg.n_panels
    K = np.zeros((2 * n, 3 * n))
    close, order, coll = _pair_classes(bg)
    ii, jj = np.nonzero(close & ~coll)
    for i, j in zip(ii, jj):
        K[2 * i : 2 * i + 2, 3 * j : 3 * j + 3] = pair_k_block(
            bg.pa[i], bg.pb[i], bg.pa[j], bg.pb[j]
        )
    far = ~close & ~coll
    for o in (6, 12, 20):
        ii, jj = np.nonzero(far & (order == o))
        if len(ii) == 0:
            continue
        B = _k_far_blocks(bg, ii, jj, o)
        for k, (i, j) in enumerate(zip(ii, jj)):
            K[2 * i : 2 * i + 2, 3 * j : 3 * j + 3] = B[k]
    return K


def _trace_scatter(bg, basis):
    """(3n, dim) sparse map from volume coefficients to per-panel P2
    trace coefficients."""
    n = bg.n_panels
    td = bg.trace_dofs(basis)
    rows = np.arange(3 * n)
    return sp.csr_matrix(
        (np.ones(3 * n), (rows, td.ravel())), shape=(3 * n, basis.dim)
    )


def assemble_K(bg, basis):
    """(2n, dim) matrix of <K u_j, psi_i> over the volume basis traces."""
    return assemble_K_panels(bg) @ _trace_scatter(bg, basis).toarray()


def assemble_mass_C(bg, basis):
    """(2n, dim) boundary mass pairing <u_j, psi_i>."""
    n = bg.n_panels
    td = bg.trace_dofs(basis)
    M = np.zeros((2 * n, basis.dim))
    tq, wq = _gauss01(4)
    blk = np.einsum("mq,q,nq->mn", _p1_vals(tq), wq, _p2_vals(tq))
    for i in range(n):
        M[2 * i : 2 * i + 2, td[i]] += bg.h[i] * blk
    return M


# -- potential evaluation ----------------------------------------------------

class PotentialEvaluator:
    """Layer potentials of panel densities and traces, evaluated at
    arbitrary points off the panel endpoints via the closed forms."""

    def __init__(self, bg):
        self.bg = bg

    def _coords(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        bg = self.bg
        r = x[:, None, :] - bg.pa[None, :, :]
        u = np.einsum("xpa,pa->xp", r, bg.tang)
        d = np.einsum("xpa,pa->xp", r, bg.nrm)
        return x, u, d

    def single_layer(self, x, density):
        """(V rho)(x) for per-panel P1 coefficients density (n, 2)."""
        x, u, d = self._coords(x)
        h = self.bg.h[None, :]
        mom = log_moments(h, u, d, nmom=2)
        c = np.asarray(density, dtype=float)
        g = c[:, 0][None, :] * (mom[0] - mom[1]) + c[:, 1][None, :] * mom[1]
        return -(1.0 / TWO_PI) * np.einsum("xp,p->x", g, self.bg.h)

    def double_layer(self, x, trace):
        """(K g)(x) for per-panel P2 coefficients trace (n, 3)."""
        x, u, d = self._coords(x)
        mom = cauchy_moments(self.bg.h[None, :], u, d, nmom=3)
        c = np.asarray(trace, dtype=float)
        g = (
            c[:, 0][None, :] * (mom[0] - mom[1])
            + c[:, 1][None, :] * mom[1]
            + c[:, 2][None, :] * 4.0 * (mom[1] - mom[2])
        )
        return (1.0 / TWO_PI) * g.sum(axis=1)

    def single_layer_deriv(self, x, density, e):
        """Derivative of V rho along unit direction(s) e;
        d/de log|x - y| = (-w du + d dd)/Q."""
        x, u, d = self._coords(x)
        e = np.broadcast_to(np.asarray(e, dtype=float), x.shape)
        du = np.einsum("xa,pa->xp", e, self.bg.tang)
        dd = np.einsum("xa,pa->xp", e, self.bg.nrm)
        h = self.bg.h[None, :]
        W = gradlog_moments(h, u, d, nmom=2)
        D = cauchy_moments(h, u, d, nmom=2)
        c = np.asarray(density, dtype=float)
        gW = c[:, 0][None, :] * (W[0] - W[1]) + c[:, 1][None, :] * W[1]
        gD = c[:, 0][None, :] * (D[0] - D[1]) + c[:, 1][None, :] * D[1]
        return -(1.0 / TWO_PI) * ((-du) * gW + dd * gD).sum(axis=1)

    def double_layer_deriv(self, x, trace, e):
        x, u, d = self._coords(x)
        e = np.broadcast_to(np.asarray(e, dtype=float), x.shape)
        du = np.einsum("xa,pa->xp", e, self.bg.tang)
        dd = np.einsum("xa,pa->xp", e, self.bg.nrm)
        M = dcauchy_moments(self.bg.h[None, :], u, d, du, dd, nmom=3)
        c = np.asarray(trace, dtype=float)
        g = (
            c[:, 0][None, :] * (M[0] - M[1])
            + c[:, 1][None, :] * M[1]
            + c[:, 2][None, :] * 4.0 * (M[1] - M[2])
        )
        return (1.0 / TWO_PI) * g.sum(axis=1)


# -- the coupled problem -----------------------------------------------------

@dataclass
class CoupledProblemData:
    """Transmission data: -Lap u = F inside, jump [u] = U and
    [dn u] = Phi across the boundary.  U_ds is the arc-length
    derivative of U along the CCW tangent (used by the estimator when
    available); xi is the stabilization weight as per-panel P1
    coefficients (default: the constant 1/|Gamma|)."""

    F: object = None
    U: object = None
    U_ds: object = None
    Phi: object = None
    xi: object = None


@dataclass
class CoupledSystem:
    """Stabilized coupled Galerkin system on a mesh.

    Block layout with n1 volume dofs u and n2 = 2 * n_panels density
    dofs phi, M_ij = a(w_j, w_i):

        [ A          -Mb^T ] [ u   ]     plus the rank-1 g g^T term,
        [ Mb/2 - Kb   Vb   ] [ phi ]     g_i = <xi, (1/2-K)u_i + V phi_i>
    """

    mesh: object
    basis: object
    bg: BoundaryGeom
    A: object
    Vb: np.ndarray
    Kb: np.ndarray       # <K u_j, psi_i>
    Mb: np.ndarray       # <u_j, psi_i>
    Kp: np.ndarray       # (2n, 3n) panel-level double layer
    g: np.ndarray
    rhs: np.ndarray
    xi: np.ndarray

    @property
    def n1(self):
        return self.basis.dim

    @property
    def n2(self):
        return 2 * self.bg.n_panels

    @property
    def dim(self):
        return self.n1 + self.n2

    def matrix(self):
        n1 = self.n1
        M = np.zeros((self.dim, self.dim))
        M[:n1, :n1] = self.A.toarray()
        M[:n1, n1:] = -self.Mb.T
        M[n1:, :n1] = 0.5 * self.Mb - self.Kb
        M[n1:, n1:] = self.Vb
        M += np.outer(self.g, self.g)
        return M

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        n1 = self.n1
        u, phi = x[:n1], x[n1:]
        out = np.empty_like(x)
        out[:n1] = self.A @ u - self.Mb.T @ phi
        out[n1:] = (0.5 * self.Mb - self.Kb) @ u + self.Vb @ phi
        out += self.g * float(self.g @ x)
        return out

    def trace_coeffs(self, u_coeffs):
        """Per-panel (n, 3) P2 trace coefficients of a volume function."""
        return np.asarray(u_coeffs)[self.bg.trace_dofs(self.basis)]

    def density_coeffs(self, phi_coeffs):
        return np.asarray(phi_coeffs).reshape(-1, 2)


def panel_p2_interp(bg, f):
    """Per-panel P2 interpolation coefficients (n, 3) of a callable."""
    if f is None:
        return np.zeros((bg.n_panels, 3))
    va = np.asarray(f(bg.pa), dtype=float)
    vb = np.asarray(f(bg.pb), dtype=float)
    vm = np.asarray(f(0.5 * (bg.pa + bg.pb)), dtype=float)
    return np.column_stack([va, vb, vm - 0.5 * (va + vb)])


def _mass_apply(bg, trace_coeffs):
    """(2n,) vector <g, psi_i> for per-panel P2 coefficients of g."""
    tq, wq = _gauss01(4)
    blk = np.einsum("mq,q,nq->mn", _p1_vals(tq), wq, _p2_vals(tq))
    out = np.einsum("mn,pn,p->pm", blk, np.asarray(trace_coeffs, float), bg.h)
    return out.reshape(-1)


def assemble_coupled(mesh, data: CoupledProblemData, basis=None):
    """Assemble the stabilized coupled system on a mesh."""
    basis = basis if basis is not None else S2PlusBasis(mesh)
    bg = boundary_geom(mesh)
    A = assemble_fem(mesh, basis)
    Vb = assemble_V(bg)
    Kp = assemble_K_panels(bg)
    Kb = Kp @ _trace_scatter(bg, basis).toarray()
    Mb = assemble_mass_C(bg, basis)
    n1, n2 = basis.dim, 2 * bg.n_panels
    if data.xi is not None:
        xi = np.asarray(data.xi, dtype=float).reshape(-1)
    else:
        xi = np.full(n2, 1.0 / bg.length)
    # <xi, 1>: each P1 shape integrates to h/2 on its panel
    if abs(float(xi @ (np.repeat(bg.h, 2) * 0.5))) < 1e-14:
        raise ValueError("stabilization weight xi has <xi, 1> = 0")
    # the Galerkin rows already integrate against the P1 shapes, so
    # <xi, .> of any column is xi's coefficient combination of the rows
    g = np.zeros(n1 + n2)
    g[:n1] = xi @ (0.5 * Mb - Kb)
    g[n1:] = xi @ Vb
    # right-hand side <F, v> + <Phi, v> + <psi, (1/2-K)U>, then the
    # stabilization adds <xi, (1/2-K)U> * g
    rhs = np.zeros(n1 + n2)
    if data.F is not None:
        pts = np.einsum("qa,nab->nqb", TRI_POINTS, mesh.coords[mesh.tri])
        vals = np.asarray(data.F(pts.reshape(-1, 2)), dtype=float).reshape(
            mesh.n_elements, -1
        )
        N = shape_values(TRI_POINTS)
        loc = np.einsum("nq,q,qj,n->nj", vals, TRI_WEIGHTS, N, mesh.area)
        np.add.at(rhs, basis.elem_dofs, loc)
    td = bg.trace_dofs(basis)
    if data.Phi is not None:
        tq, wq = _gauss01(8)
        x = bg.quad_points(tq)
        vals = np.asarray(data.Phi(x.reshape(-1, 2)), dtype=float).reshape(
            bg.n_panels, -1
        )
        loc = np.einsum("pq,q,nq,p->pn", vals, wq, _p2_vals(tq), bg.h)
        np.add.at(rhs, td, loc)
    Uc = panel_p2_interp(bg, data.U)
    if Uc.any():
        col = 0.5 * _mass_apply(bg, Uc) - Kp @ Uc.reshape(-1)
        rhs[n1:] += col
        rhs += float(xi @ col) * g
    return CoupledSystem(
        mesh=mesh, basis=basis, bg=bg, A=A, Vb=Vb, Kb=Kb, Mb=Mb, Kp=Kp,
        g=g, rhs=rhs, xi=xi,
    )


# -- estimator support -------------------------------------------------------

def boundary_residual_derivative(sys: CoupledSystem, solution, data):
    """Per-boundary-panel L2 norms of the arc-length derivative of the
    boundary residual (1/2 - K)(U - u) - V phi."""
    bg = sys.bg
    n1 = sys.n1
    u = np.asarray(solution)[:n1]
    phi = sys.density_coeffs(np.asarray(solution)[n1:])
    tr_u = sys.trace_coeffs(u)
    Uc = panel_p2_interp(bg, data.U)
    diff = Uc - tr_u
    ev = PotentialEvaluator(bg)
    tq, wq = _gauss01(8)
    dchi = _p2_dvals(tq)
    out = np.zeros(bg.n_panels)
    for i in range(bg.n_panels):
        h = float(bg.h[i])
        x = bg.pa[i] + tq[:, None] * (bg.pb[i] - bg.pa[i])
        e = bg.tang[i]
        if data.U_ds is not None:
            dds = np.asarray(data.U_ds(x), dtype=float) - tr_u[i] @ dchi / h
        else:
            dds = diff[i] @ dchi / h
        r = 0.5 * dds
        r -= ev.double_layer_deriv(x, diff, e)
        r -= ev.single_layer_deriv(x, phi, e)
        out[i] = np.sqrt(h * float(np.sum(wq * r * r)))
    return out


# -- small utilities ---------------------------------------------------------

def dump_matrix(M, path):
    """Coordinate-format text dump: 'row col value' per nonzero entry."""
    if sp.issparse(M):
        C = M.tocoo()
        rows, cols, vals = C.row, C.col, C.data
        shape = M.shape
    else:
        M = np.asarray(M)
        rows, cols = np.nonzero(M)
        vals = M[rows, cols]
        shape = M.shape
    with open(path, "w") as fh:
        fh.write(f"% {shape[0]} {shape[1]}\n")
        for r, c, v in zip(rows, cols, vals):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def min_symmetric_eig(M):
    """Smallest eigenvalue of the symmetric part (measured ellipticity)."""
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
