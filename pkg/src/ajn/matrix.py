"""Finite-section machinery for infinite-matrix arguments.

Distances between hierarchical basis functions (chain metrics over the
uniform mesh family, level-weighted variants), banded truncation with
measured spectral error, Neumann-series approximate inverses, block-LDU
factorization, Jaffard-class certification, and the quasi-orthogonality
certificate that combines all of the above on the level-permuted
Galerkin matrix of an adaptive run.

Everything here operates on finite sections of the (conceptually
infinite) matrices; stability under section growth is reported by the
callers, not proven.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import csgraph

__all__ = [
    "MetricParams",
    "BlockStructure",
    "LDUFactors",
    "NeumannParams",
    "metric",
    "pairwise_metric",
    "search_metric_params",
    "banded_truncate",
    "neumann_inverse",
    "block_ldu",
    "luid_residual",
    "jaffard_certify",
    "qo_certificate",
    "norm_bounds",
    "spectral_norm",
    "ellipticity",
    "block_bandwidth",
    "save_matrix",
    "load_matrix",
]


# -- norms -------------------------------------------------------------------


def spectral_norm(M, rtol=1e-10, max_iter=20000, seed=0):
    """Largest singular value by power iteration on M^T M.

    Deterministic start vector; accurate to rtol relative (checked
    against dense SVD in the tests for sections up to 2000).
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    s_old = 0.0
    for _ in range(max_iter):
        y = M @ x
        z = M.T @ y
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return float(np.linalg.norm(y))
        # x stays a unit vector, so ||Mx|| is the Rayleigh estimate
        s = float(np.linalg.norm(y))
        if abs(s - s_old) <= rtol * max(s, 1e-300):
            return s
        s_old = s
        x = z / nz
    return s_old


def ellipticity(M):
    """Smallest eigenvalue of the symmetric part (dense, sections only)."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] == 0:
        return 0.0
    sym = 0.5 * (M + M.T)
    return float(np.linalg.eigvalsh(sym)[0])


def norm_bounds(M, blocks=None):
    """Computable norm bounds for a finite section.

    Returns a dict with the column-sum norm `one`, the row-sum norm
    `inf`, the interpolation bound `two_bound` = sqrt(one*inf), and the
    measured spectral norm `two`.  With a block structure, also reports
    the block-stability bound `blockstab` = (2b+1)^2 * max block
    spectral norm, where b is the measured block bandwidth.
    """
    M = np.asarray(M, dtype=float)
    a = np.abs(M)
    n1 = float(a.sum(axis=0).max(initial=0.0))
    ninf = float(a.sum(axis=1).max(initial=0.0))
    out = {
        "one": n1,
        "inf": ninf,
        "two_bound": float(np.sqrt(n1 * ninf)),
        "two": spectral_norm(M),
    }
    if blocks is not None:
        b = block_bandwidth(M, blocks)
        sup = 0.0
        for i in range(blocks.n_blocks):
            for j in range(blocks.n_blocks):
                blk = M[blocks.block(i), blocks.block(j)]
                if np.any(blk):
                    sup = max(sup, spectral_norm(blk))
        out["blockstab"] = float((2 * b + 1) ** 2 * sup)
    return out


# -- metric parameters and chain distances -----------------------------------


@dataclass
class MetricParams:
    """Weights for the level-aware basis-function metrics.

    beta weighs level differences in d2, gamma is the base of the
    cross-level penalty in d3, and hierarchy is the uniform mesh family
    whose meshes carry the element chains of delta_k.  Both weights are
    meant to be found by search_metric_params, which doubles them until
    the triangle inequality holds on a random triple sample; they are
    validated, not assumed.
    """

    beta: float
    gamma: float
    hierarchy: object
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    def level_mesh(self, k):
        levels = self.hierarchy.levels
        if k < 0 or k >= len(levels):
            raise ValueError(
                f"hierarchy too shallow for delta_{k}: only "
                f"{len(levels)} uniform meshes available"
            )
        return levels[k]

    def level_graph(self, k):
        """Uniform mesh at level k and its vertex-sharing element graph."""
        if k not in self._graphs:
            mesh = self.level_mesh(k)
            inc = sp.csr_matrix(
                (
                    np.ones(3 * mesh.n_elements),
                    (np.repeat(np.arange(mesh.n_elements), 3), mesh.tri.ravel()),
                ),
                shape=(mesh.n_elements, mesh.n_vertices),
            )
            adj = (inc @ inc.T).astype(bool).astype(np.int8)
            self._graphs[k] = (mesh, sp.csr_matrix(adj))
        return self._graphs[k]


def _chain_delta(params, k, pa, pb):
    """delta_k between two points: length of the shortest element chain
    in the uniform level-k mesh connecting them (consecutive elements
    share at least a vertex)."""
    mesh, adj = params.level_graph(k)
    ea = mesh.locate_point(pa)
    eb = mesh.locate_point(pb)
    if ea == eb:
        return 1
    dist = csgraph.dijkstra(adj, unweighted=True, indices=ea)
    d = dist[eb]
    if not np.isfinite(d):
        raise RuntimeError("uniform mesh element graph is disconnected")
    return int(d) + 1


def _same_function(v, w):
    return v is w or (v.kind, v.level, tuple(v.label)) == (
        w.kind,
        w.level,
        tuple(w.label),
    )


def metric(v, w, kind, params, k=None):
    """Distance between two hierarchical basis functions.

    kind is one of "delta" (needs the chain level k), "d1", "d2", "d3".
    delta_k is the shortest chain of level-k uniform elements joining
    the support barycenters; d1 evaluates it at min(L(v), L(w)); d2 and
    d3 are the level-weighted combinations with params.beta/gamma.
    """
    if kind == "delta":
        if k is None:
            raise ValueError("delta metric needs the chain level k")
        return float(_chain_delta(params, k, v.mid, w.mid))
    lv, lw = int(v.level), int(w.level)
    if kind == "d1":
        return float(_chain_delta(params, min(lv, lw), v.mid, w.mid))
    same = _same_function(v, w)
    if kind == "d2":
        if same:
            return 0.0
        d1 = _chain_delta(params, min(lv, lw), v.mid, w.mid)
        return float(1.0 + params.beta * abs(lv - lw) + np.log(1.0 + d1))
    if kind == "d3":
        if lv != lw:
            return float(params.gamma ** max(lv, lw))
        if same:
            return 0.0
        # delta + d1 - 1 with delta = 1 for distinct functions
        return float(_chain_delta(params, lv, v.mid, w.mid))
    raise ValueError(f"unknown metric kind {kind!r}")


def _pairwise_d1(funcs, params):
    """Matrix of d1 distances, batched one BFS sweep per level."""
    n = len(funcs)
    lev = np.array([f.level for f in funcs], dtype=np.int64)
    mids = np.array([f.mid for f in funcs], dtype=float)
    d1 = np.zeros((n, n))
    for k in np.unique(lev):
        k = int(k)
        sel = np.flatnonzero(lev >= k)
        if sel.size == 0:
            continue
        mesh, adj = params.level_graph(k)
        elems = np.array([mesh.locate_point(mids[i]) for i in sel], dtype=np.int64)
        srcs, inv = np.unique(elems, return_inverse=True)
        dist = csgraph.dijkstra(adj, unweighted=True, indices=srcs)
        dk = dist[np.ix_(inv, elems)] + 1.0
        # pairs whose smaller level equals k
        la = lev[sel]
        mask = np.minimum(la[:, None], la[None, :]) == k
        rows = np.repeat(sel, sel.size).reshape(sel.size, sel.size)
        d1[rows[mask], rows.T[mask]] = dk[mask]
    if not np.all(np.isfinite(d1)):
        raise RuntimeError("uniform mesh element graph is disconnected")
    return d1


def pairwise_metric(funcs, kind, params, k=None):
    """Full distance matrix over a list of basis functions."""
    n = len(funcs)
    lev = np.array([f.level for f in funcs], dtype=np.int64)
    if kind == "delta":
        if k is None:
            raise ValueError("delta metric needs the chain level k")
        mesh, adj = params.level_graph(k)
        elems = np.array([mesh.locate_point(f.mid) for f in funcs], dtype=np.int64)
        srcs, inv = np.unique(elems, return_inverse=True)
        dist = csgraph.dijkstra(adj, unweighted=True, indices=srcs)
        return dist[np.ix_(inv, elems)] + 1.0
    d1 = _pairwise_d1(funcs, params)
    if kind == "d1":
        return d1
    delta = 1.0 - np.eye(n)
    if kind == "d2":
        dl = np.abs(lev[:, None] - lev[None, :]).astype(float)
        return delta + params.beta * dl + np.log(delta + d1)
    if kind == "d3":
        out = delta + d1 - 1.0
        diff = lev[:, None] != lev[None, :]
        lmax = np.maximum(lev[:, None], lev[None, :]).astype(float)
        out[diff] = params.gamma ** lmax[diff]
        return out
    raise ValueError(f"unknown metric kind {kind!r}")


def search_metric_params(
    funcs, hierarchy, n_triples=10000, seed=0, beta0=0.25, gamma0=1.25, max_doublings=40
):
    """Find beta and gamma by doubling until the d2 and d3 triangle
    inequalities hold on a random triple sample.

    The starting values are deliberately small so the search is
    meaningful; too-small weights genuinely violate the triangle
    inequality on adaptive hierarchies.
    """
    params = MetricParams(beta=beta0, gamma=gamma0, hierarchy=hierarchy)
    n = len(funcs)
    if n < 3:
        return params
    rng = np.random.default_rng(seed)
    tri = rng.integers(0, n, size=(n_triples, 3))
    d1 = _pairwise_d1(funcs, params)
    lev = np.array([f.level for f in funcs], dtype=np.int64)
    delta = 1.0 - np.eye(n)
    i, j, m = tri[:, 0], tri[:, 1], tri[:, 2]
    tol = 1e-9

    def d2_ok(beta):
        dl = np.abs(lev[:, None] - lev[None, :]).astype(float)
        d2 = delta + beta * dl + np.log(delta + d1)
        return np.all(d2[i, m] <= d2[i, j] + d2[j, m] + tol)

    def d3_ok(gamma):
        d3 = delta + d1 - 1.0
        diff = lev[:, None] != lev[None, :]
        lmax = np.maximum(lev[:, None], lev[None, :]).astype(float)
        d3 = np.where(diff, gamma ** lmax, d3)
        return np.all(d3[i, m] <= d3[i, j] + d3[j, m] + tol)

    beta = beta0
    for _ in range(max_doublings):
        if d2_ok(beta):
            break
        beta *= 2.0
    else:
        raise RuntimeError("no beta found for the d2 triangle inequality")
    gamma = gamma0
    for _ in range(max_doublings):
        if d3_ok(gamma):
            break
        gamma *= 2.0
    else:
        raise RuntimeError("no gamma found for the d3 triangle inequality")
    return MetricParams(beta=float(beta), gamma=float(gamma), hierarchy=hierarchy)


# -- block structure ---------------------------------------------------------


@dataclass(frozen=True)
class BlockStructure:
    """Partition of a finite index range into consecutive blocks.

    offsets is the strictly increasing array [0, n_1, ..., n], so block
    i covers indices offsets[i]:offsets[i+1] and the blocks cover the
    whole range.
    """

    offsets: tuple

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64)
        if off.size < 2 or off[0] != 0 or np.any(np.diff(off) <= 0):
            raise ValueError("block offsets must start at 0 and strictly increase")
        object.__setattr__(self, "offsets", tuple(int(o) for o in off))

    @property
    def n(self):
        return self.offsets[-1]

    @property
    def n_blocks(self):
        return len(self.offsets) - 1

    def block(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])

    def block_of(self, index):
        return int(np.searchsorted(self.offsets, index, side="right") - 1)

    @classmethod
    def from_levels(cls, levels):
        """Group consecutive equal level ids into blocks (input must be
        sorted nondecreasing, as after the level permutation)."""
        lev = np.asarray(levels, dtype=np.int64)
        if np.any(np.diff(lev) < 0):
            raise ValueError("levels must be nondecreasing")
        cuts = np.flatnonzero(np.diff(lev)) + 1
        return cls(offsets=tuple([0, *cuts.tolist(), lev.size]))

    @classmethod
    def from_sections(cls, n_l):
        """Boundaries from strictly increasing section sizes n_l."""
        return cls(offsets=tuple([0, *[int(x) for x in n_l]]))


def block_bandwidth(M, blocks):
    """Largest |i - j| over nonzero blocks of M."""
    M = np.asarray(M, dtype=float)
    b = 0
    for i in range(blocks.n_blocks):
        for j in range(blocks.n_blocks):
            if abs(i - j) > b and np.any(M[blocks.block(i), blocks.block(j)]):
                b = abs(i - j)
    return b


# -- banded truncation -------------------------------------------------------


def banded_truncate(M, dist, b):
    """Zero all entries with dist > b; returns (M_trunc, spectral error).

    dist is the precomputed distance matrix of the index set (any of
    the metrics above, or |i - j| for plain banding).
    """
    M = np.asarray(M, dtype=float)
    dist = np.asarray(dist, dtype=float)
    if dist.shape != M.shape:
        raise ValueError("distance matrix shape does not match the section")
    Mc = np.where(dist <= b, M, 0.0)
    return Mc, spectral_norm(M - Mc)


# -- Neumann series inverse --------------------------------------------------


@dataclass(frozen=True)
class NeumannParams:
    """Measured quantities behind a Neumann-series inverse.

    alpha = cEll / opNorm^2 scales the series, q = 1 - cEll^2/opNorm^2
    is the contraction factor, N is the minimal series length whose
    geometric tail sum_{k>N} q^k is below the requested tolerance.
    """

    cEll: float
    opNorm: float
    alpha: float
    q: float
    N: int


def _geometric_sum(T, n, eye):
    """sum_{k=0}^{n-1} T^k via repeated squaring, O(log n) products.

    Returns (partial sum); huge term counts from pessimistic contraction
    factors q close to 1 stay affordable this way.
    """
    total = eye.copy()
    power = T
    m = 1
    # partial sum over m terms and the matching power T^m
    for bit in bin(n)[3:]:
        total = total + power @ total
        power = power @ power
        m *= 2
        if bit == "1":
            total = total + power
            power = power @ T
            m += 1
    return total


def neumann_inverse(M, eps):
    """Approximate inverse R = alpha * sum_{k=0}^N (I - alpha M)^k.

    alpha = cEll/opNorm^2 makes I - alpha*M a contraction; N is chosen
    minimal so the geometric tail sum_{k>N} q^k is at most eps.  Raises
    ValueError when the measured ellipticity is not positive.
    """
    M = np.asarray(M, dtype=float)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = ellipticity(M)
    if c <= 0:
        raise ValueError(f"matrix is not elliptic (measured cEll = {c:.3e})")
    nrm = spectral_norm(M)
    alpha = c / nrm ** 2
    q = 1.0 - c ** 2 / nrm ** 2
    if q < 0:
        q = 0.0
    if q >= 1.0:
        raise ValueError("contraction factor q must be < 1")
    if q == 0.0:
        N = 0
    else:
        # tail(N) = q^(N+1)/(1-q) <= eps
        N = max(0, int(np.ceil(np.log(eps * (1.0 - q)) / np.log(q))) - 1)
        while q ** (N + 1) / (1.0 - q) > eps:
            N += 1
        while N > 0 and q ** N / (1.0 - q) <= eps:
            N -= 1
    n = M.shape[0]
    T = np.eye(n) - alpha * M
    R = _geometric_sum(T, N + 1, np.eye(n))
    return alpha * R, NeumannParams(
        cEll=float(c), opNorm=float(nrm), alpha=float(alpha), q=float(q), N=int(N)
    )


# -- block LDU ---------------------------------------------------------------


@dataclass(frozen=True)
class LDUFactors:
    """Block factorization M = L D U.

    L is block-lower with identity diagonal blocks, D block-diagonal, U
    block-upper with identity diagonal blocks.  bandwidth is the
    measured block bandwidth of the triangular factors, error the
    achieved spectral reconstruction error."""

    L: np.ndarray
    D: np.ndarray
    U: np.ndarray
    blocks: BlockStructure
    bandwidth: int
    error: float


def block_ldu(M, blocks, eps=1e-8):
    """Exact block Gaussian elimination, unpivoted at the block level.

    Raises RuntimeError naming the block index when a pivot block is
    singular, and when the reconstruction error exceeds eps.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n) or blocks.n != n:
        raise ValueError("block structure does not cover the matrix")
    S = M.copy()
    L = np.eye(n)
    U = np.eye(n)
    D = np.zeros((n, n))
    m = blocks.n_blocks
    for j in range(m):
        sj = blocks.block(j)
        P = S[sj, sj].copy()
        D[sj, sj] = P
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu, piv = scipy.linalg.lu_factor(P, check_finite=False)
        dg = np.abs(np.diag(lu))
        if not np.all(np.isfinite(lu)) or np.any(
            dg <= P.shape[0] * np.finfo(float).eps * max(dg.max(initial=0.0), 1e-300)
        ):
            raise RuntimeError(f"singular pivot block {j} in block LDU")
        rest = slice(blocks.offsets[j + 1], n)
        if rest.start >= n:
            continue
        Lj = scipy.linalg.lu_solve((lu, piv), S[rest, sj].T, trans=1).T
        Uj = scipy.linalg.lu_solve((lu, piv), S[sj, rest])
        L[rest, sj] = Lj
        U[sj, rest] = Uj
        S[rest, rest] -= Lj @ P @ Uj
    err = spectral_norm(M - L @ D @ U)
    if err > eps:
        raise RuntimeError(
            f"block LDU reconstruction error {err:.3e} exceeds eps {eps:.3e}"
        )
    bw = max(block_bandwidth(L - np.eye(n), blocks), block_bandwidth(U - np.eye(n), blocks))
    return LDUFactors(L=L, D=D, U=U, blocks=blocks, bandwidth=bw, error=float(err))


def luid_residual(M, factors):
    """Deviation in the section-inverse identity of the LDU factors.

    For the non-unit upper factor W = D U, the last block column of the
    inverse of every leading principal section of M agrees with the
    corresponding block column of W^{-1}.  Returns the max deviation
    over all sections, relative to the largest inverse entry involved
    (inverse entries scale like 1/ellipticity, so an absolute residual
    would just measure the conditioning).
    """
    M = np.asarray(M, dtype=float)
    blocks = factors.blocks
    W = factors.D @ factors.U
    Winv = np.linalg.inv(W)
    worst = 0.0
    for k in range(blocks.n_blocks):
        nk = blocks.offsets[k + 1]
        sk = blocks.block(k)
        Sinv = np.linalg.inv(M[:nk, :nk])
        scale = max(float(np.abs(Sinv[:, sk]).max()), 1.0)
        worst = max(
            worst, float(np.abs(Sinv[:, sk] - Winv[:nk, sk]).max()) / scale
        )
    return worst


# -- Jaffard certification ---------------------------------------------------


def jaffard_certify(M, dist, gamma_prime):
    """Smallest C with |M_ij| <= C exp(-gamma_prime * dist_ij).

    Returns a dict with that constant C and the row-sum statistic
    sup_i sum_j exp(-gamma_prime * dist_ij), the finite-section check
    of summability of the metric.
    """
    M = np.asarray(M, dtype=float)
    dist = np.asarray(dist, dtype=float)
    if dist.shape != M.shape:
        raise ValueError("distance matrix shape does not match the section")
    a = np.abs(M)
    with np.errstate(divide="ignore"):
        logc = np.where(a > 0, np.log(a) + gamma_prime * dist, -np.inf)
    top = float(logc.max(initial=-np.inf))
    C = 0.0 if top == -np.inf else (float("inf") if top > 700 else float(np.exp(top)))
    row = float(np.exp(-gamma_prime * dist).sum(axis=1).max(initial=0.0))
    return {"C": C, "row_sum": row}


# -- quasi-orthogonality certificate -----------------------------------------


def qo_certificate(
    A,
    levels,
    eps,
    n_l,
    f,
    d2=None,
    d3=None,
    gamma_prime=1.0,
    bandwidth=None,
):
    """Numerical quasi-orthogonality certificate for a Galerkin matrix.

    A is assembled in the hierarchical basis (ordered by entering
    section, leading n_l[j] x n_l[j] sections are the step-j systems),
    levels gives the uniform level of each basis function, f is the
    load vector of the run.  Pipeline: permute by level, truncate to a
    banded matrix within eps * ||A||_2 (using the d2 distances when
    given), factor the truncation by blocks per level, certify the
    block diagonal in the d3 metric, then verify the telescoping
    structure of the section solutions through the section-ordered LDU
    and report the worst quasi-orthogonality ratio.

    Returns a dict of diagnostics suitable for JSON serialization.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    lev = np.asarray(levels, dtype=np.int64)
    if lev.size != n:
        raise ValueError("levels must give one level per basis function")
    f = np.asarray(f, dtype=float)
    if f.size != n:
        raise ValueError("load vector length does not match the section")
    norm_a = spectral_norm(A)
    if ellipticity(A) <= 0:
        raise RuntimeError(
            "matrix is not elliptic; the certificate pipeline needs an "
            "elliptic section (retry with a finer run or smaller eps)"
        )

    # (1) permute by level
    perm = np.argsort(lev, kind="stable")
    At = A[np.ix_(perm, perm)]
    blocks = BlockStructure.from_levels(lev[perm])

    # (2) banded truncation
    if d2 is not None:
        d2p = np.asarray(d2, dtype=float)[np.ix_(perm, perm)]
        if bandwidth is None:
            b, Ae, trunc_err = _auto_bandwidth(At, d2p, eps * norm_a)
        else:
            b = float(bandwidth)
            Ae, trunc_err = banded_truncate(At, d2p, b)
            if ellipticity(Ae) <= 0:
                raise RuntimeError(
                    "truncated matrix is not elliptic; retry with a "
                    "larger bandwidth or smaller eps"
                )
    else:
        b, Ae, trunc_err = float("inf"), At, 0.0

    # (3) block LDU of the truncation
    fac = block_ldu(Ae, blocks, eps=max(eps * norm_a, 1e-8 * max(norm_a, 1.0)))

    # (4) certify D under d3, measure its ellipticity
    if d3 is not None:
        d3p = np.asarray(d3, dtype=float)[np.ix_(perm, perm)]
        cert = jaffard_certify(fac.D, d3p, gamma_prime)
    else:
        cert = {"C": None, "row_sum": None}
    d_ell = ellipticity(fac.D)

    # (5) telescoping of the run's coefficient sequences
    sec = BlockStructure.from_sections(n_l)
    if sec.n != n:
        raise ValueError("section sizes n_l must end at the matrix size")
    sfac = block_ldu(A, sec, eps=max(eps * norm_a, 1e-8 * max(norm_a, 1.0)))
    W = sfac.D @ sfac.U
    lam = np.linalg.solve(A, f)
    lams = []
    for j in range(sec.n_blocks):
        nk = sec.offsets[j + 1]
        x = np.zeros(n)
        x[:nk] = np.linalg.solve(A[:nk, :nk], f[:nk])
        lams.append(x)
    w_full = W @ lam
    tele = 0.0
    scale = float(np.linalg.norm(w_full))
    for j, x in enumerate(lams):
        nk = sec.offsets[j + 1]
        wx = W @ x
        tele = max(tele, float(np.abs(wx[:nk] - w_full[:nk]).max(initial=0.0)))
        tele = max(tele, float(np.abs(wx[nk:]).max(initial=0.0)))
    tele_rel = tele / max(scale, 1e-300)

    G = 0.5 * (A + A.T)
    incs = []
    for j in range(len(lams)):
        nxt = lam if j + 1 == len(lams) else lams[j + 1]
        d = nxt - lams[j]
        incs.append(float(d @ G @ d))
    refs = [float((lam - x) @ G @ (lam - x)) for x in lams]
    tails = np.cumsum(np.asarray(incs)[::-1])[::-1]
    floor = 1e-12 * max(refs[0], 1e-300)
    ratios = [t / r for t, r in zip(tails, refs) if r > floor]
    c_qo = float(max(ratios)) if ratios else 1.0

    return {
        "n": int(n),
        "norm": float(norm_a),
        "trunc_bandwidth": float(b),
        "trunc_error": float(trunc_err),
        "ldu_error": float(fac.error),
        "ldu_block_bandwidth": int(fac.bandwidth),
        "jaffard_C": cert["C"],
        "jaffard_row_sum": cert["row_sum"],
        "d_ellipticity": float(d_ell),
        "telescope_residual": float(tele_rel),
        "c_qo": c_qo,
    }


def _auto_bandwidth(At, dist, tol):
    """Smallest distance cutoff keeping both the truncation error below
    tol and the truncated matrix elliptic; binary search on the sorted
    distance values (the error is monotone in the cutoff)."""
    vals = np.unique(dist)
    lo, hi = 0, vals.size - 1
    # find smallest index with error <= tol
    while lo < hi:
        mid = (lo + hi) // 2
        _, err = banded_truncate(At, dist, vals[mid])
        if err <= tol:
            hi = mid
        else:
            lo = mid + 1
    idx = lo
    while idx < vals.size:
        Ae, err = banded_truncate(At, dist, vals[idx])
        if err <= tol and ellipticity(Ae) > 0:
            return float(vals[idx]), Ae, err
        idx += 1
    raise RuntimeError(
        "no elliptic banded truncation found; retry with smaller eps"
    )


# -- coordinate-format I/O ---------------------------------------------------


def save_matrix(path, M):
    """Write a matrix in coordinate (Matrix Market) text format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(np.asarray(M, dtype=float)))


def load_matrix(path):
    """Read a coordinate-format text file into a dense array."""
    M = scipy.io.mmread(str(path))
    if sp.issparse(M):
        M = M.toarray()
    return np.asarray(M, dtype=float)
