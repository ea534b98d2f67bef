"""Tests for the adaptive driver: linear solve, residual estimator,
bulk marking, the loop itself, cross-mesh energy distances, and the
hierarchical energy bookkeeping.

Oracles: sympy symbolic integration for the estimator's volume and jump
terms, scipy adaptive quadrature for the boundary flux term, analytic
integrals of affine functions for the cross-mesh distance, exhaustive
subset search for marking minimality, and a manufactured harmonic
quadratic (representable in every trial space) for the hierarchical
Galerkin chain.
"""
import itertools

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from ajn.mesh import (
    GradingConfig,
    grading_ok,
    nvb_refine,
    patch,
    root_mesh,
    uniform_hierarchy,
)
from ajn.spaces import S2PlusBasis
from ajn.quadrature import TRI_POINTS, TRI_WEIGHTS
from ajn.hierarchy import PanelSet, hierarchical_basis, values_on
from ajn.operators import (
    CoupledProblemData,
    assemble_coupled,
    boundary_geom,
    pair_v_block,
)
from ajn.solver import (
    AdaptiveConfig,
    AdaptiveRunRecord,
    EstimatorResult,
    adaptive_loop,
    assemble_hierarchical,
    energy_norms,
    estimate,
    increment_energies,
    mark,
    qo_ratios,
    reference_errors,
    section_solutions,
    solve,
    x_distance,
    _dense_solve,
    _krylov_solve,
    _collect_panels,
    _v_gram,
)


def scaled_square(s=0.3):
    return root_mesh([(0, 0), (s, 0), (s, s), (0, s)], [(0, 1, 2), (0, 2, 3)])


def scaled_lshape(s=0.2):
    pts = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1)]
    coords = [(s * x, s * y) for x, y in pts]
    tris = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 5, 6), (0, 6, 7)]
    return root_mesh(coords, tris)


def zero_data():
    return CoupledProblemData()


def unit_f_data():
    return CoupledProblemData(F=lambda x: np.ones(len(np.atleast_2d(x))))


def lshape_normal(p, s=0.2):
    """Outward normal of the scaled L-shape boundary at boundary points."""
    p = np.atleast_2d(p)
    n = np.zeros_like(p)
    tol = 1e-12
    n[np.abs(p[:, 1] + s) < tol] = [0, -1]
    n[np.abs(p[:, 0] + s) < tol] = [-1, 0]
    n[np.abs(p[:, 1] - s) < tol] = [0, 1]
    n[(np.abs(p[:, 0] - s) < tol) & (p[:, 1] > -tol)] = [1, 0]
    # reentrant edges
    n[(np.abs(p[:, 0]) < tol) & (p[:, 1] < tol) & (p[:, 1] > -s + tol)] = [1, 0]
    n[(np.abs(p[:, 1]) < tol) & (p[:, 0] > tol)] = [0, -1]
    return n


def manufactured_quadratic_data(s=0.2):
    """U and Phi of the harmonic u* = x^2 - y^2 + 3 with zero exterior
    field: the exact coupled solution is (u*, phi = 0) and u* lies in
    every S2+ trial space."""

    def uex(p):
        p = np.atleast_2d(p)
        return p[:, 0] ** 2 - p[:, 1] ** 2 + 3.0

    def Phi(p):
        p = np.atleast_2d(p)
        g = np.column_stack([2 * p[:, 0], -2 * p[:, 1]])
        return np.einsum("ij,ij->i", g, lshape_normal(p, s))

    return CoupledProblemData(U=uex, Phi=Phi), uex


# -- linear solve ------------------------------------------------------------


def test_zero_rhs_gives_exact_zero():
    sys = assemble_coupled(scaled_lshape(), zero_data())
    x = solve(sys)
    assert np.all(x == 0.0)


def test_solve_residual_below_tolerance():
    sys = assemble_coupled(scaled_lshape(), unit_f_data())
    x = solve(sys)
    r = np.linalg.norm(sys.apply(x) - sys.rhs) / np.linalg.norm(sys.rhs)
    assert r <= 1e-12


def test_solve_galerkin_orthogonality():
    # the residual functional vanishes on every trial function
    sys = assemble_coupled(scaled_lshape(), unit_f_data())
    x = solve(sys)
    res = sys.apply(x) - sys.rhs
    assert np.abs(res).max() <= 1e-10 * np.linalg.norm(sys.rhs)


def test_dense_solve_permutation_invariance():
    rng = np.random.default_rng(7)
    n = 40
    A = rng.standard_normal((n, n)) + n * np.eye(n)
    b = rng.standard_normal(n)
    p = rng.permutation(n)
    x = _dense_solve(A, b)
    xp = _dense_solve(A[np.ix_(p, p)], b[p])
    assert np.abs(xp - x[p]).max() <= 1e-11 * np.abs(x).max()


def test_dense_solve_singular_matrix_raises():
    with pytest.raises(RuntimeError, match="solve"):
        _dense_solve(np.zeros((3, 3)), np.ones(3))


def test_krylov_matches_dense():
    sys = assemble_coupled(nvb_refine(scaled_lshape(), range(6)), unit_f_data())
    xd = _dense_solve(sys.matrix(), sys.rhs)
    xk = _krylov_solve(sys, sys.rhs)
    assert np.linalg.norm(xk - xd) <= 1e-9 * np.linalg.norm(xd)


# -- estimator ---------------------------------------------------------------


def test_estimator_zero_for_zero_data():
    sys = assemble_coupled(scaled_lshape(), zero_data())
    est = estimate(sys, np.zeros(sys.dim), zero_data())
    assert np.all(est.per_element == 0.0)
    assert est.total == 0.0


def test_estimator_scales_linearly():
    s = 0.2
    mesh = nvb_refine(scaled_lshape(s), [0, 2, 4])
    data, _ = manufactured_quadratic_data(s)
    data.F = lambda p: 1.0 + np.atleast_2d(p)[:, 0]
    sys = assemble_coupled(mesh, data)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(sys.dim)
    est1 = estimate(sys, x, data)
    c = -2.5
    datac = CoupledProblemData(
        F=lambda p: c * data.F(p), U=lambda p: c * data.U(p),
        Phi=lambda p: c * data.Phi(p),
    )
    est2 = estimate(sys, c * x, datac)
    assert np.allclose(est2.per_element, abs(c) * est1.per_element,
                       rtol=1e-11, atol=0.0)


def test_estimator_bubble_oracle_sympy():
    # one element-bubble coefficient on the two-triangle square: the
    # exact volume, jump, and boundary flux terms come out of symbolic
    # integration
    s = 0.3
    mesh = scaled_square(s)
    basis = S2PlusBasis(mesh)
    sys = assemble_coupled(mesh, zero_data(), basis)
    c = 0.7
    x = np.zeros(sys.dim)
    bubble_dof = basis.elem_dofs[0][6]
    x[bubble_dof] = c

    xs, ys = sp.symbols("x y", real=True)
    verts = [sp.Matrix(v) for v in mesh.coords[mesh.tri[0]]]
    # barycentric coordinates on element 0
    A = sp.Matrix([[1, 1, 1],
                   [verts[0][0], verts[1][0], verts[2][0]],
                   [verts[0][1], verts[1][1], verts[2][1]]])
    lam = A.solve(sp.Matrix([1, xs, ys]))
    b = 27 * lam[0] * lam[1] * lam[2] * c
    lap = sp.diff(b, xs, 2) + sp.diff(b, ys, 2)

    def tri_integral(expr):
        # map the reference triangle onto element 0
        u, v = sp.symbols("u v", nonnegative=True)
        p = verts[0] + u * (verts[1] - verts[0]) + v * (verts[2] - verts[0])
        jac = sp.Abs((verts[1] - verts[0]).T * sp.Matrix([[0, -1], [1, 0]])
                     * (verts[2] - verts[0]))[0]
        inner = sp.integrate(expr.subs({xs: p[0], ys: p[1]}), (v, 0, 1 - u))
        return sp.integrate(inner, (u, 0, 1)) * jac

    def edge_integral(expr, pa, pb, nrm):
        t = sp.symbols("t", nonnegative=True)
        p = sp.Matrix(pa) + t * (sp.Matrix(pb) - sp.Matrix(pa))
        ln = sp.sqrt(((sp.Matrix(pb) - sp.Matrix(pa)).T
                      * (sp.Matrix(pb) - sp.Matrix(pa)))[0])
        dn = (sp.diff(expr, xs) * nrm[0] + sp.diff(expr, ys) * nrm[1])
        return sp.integrate(dn.subs({xs: p[0], ys: p[1]}) ** 2, (t, 0, 1)) * ln

    I_lap = float(tri_integral(lap ** 2))
    # edges of element 0: (0,0)-(s,0) and (s,0)-(s,s) on the boundary,
    # (0,0)-(s,s) shared with element 1
    J_bottom = float(edge_integral(b, (0, 0), (s, 0), (0, -1)))
    J_right = float(edge_integral(b, (s, 0), (s, s), (1, 0)))
    r2 = 1.0 / np.sqrt(2.0)
    J_diag = float(edge_integral(b, (0, 0), (s, s), (r2, -r2)))

    d = mesh.diameters()
    expected = np.zeros(2)
    expected[0] = d[0] ** 2 * I_lap + d[0] * (J_diag + J_bottom + J_right)
    expected[1] = d[1] * J_diag
    est = estimate(sys, x, zero_data())
    assert np.allclose(est.per_element ** 2, expected, rtol=1e-11)


def test_estimator_flux_oracle_quadrature():
    # zero solution and a cubic Phi: eta_T^2 = diam(T) int_{dT cap Gamma}
    # Phi^2, checked against scipy quadrature panel by panel
    mesh = nvb_refine(scaled_lshape(), [1, 3])
    data = CoupledProblemData(
        Phi=lambda p: np.atleast_2d(p)[:, 0] ** 3
        - 2.0 * np.atleast_2d(p)[:, 1] + 0.3
    )
    sys = assemble_coupled(mesh, data)
    est = estimate(sys, np.zeros(sys.dim), data)
    bg = sys.bg
    diam = mesh.diameters()
    expected = np.zeros(mesh.n_elements)
    for i in range(bg.n_panels):
        pa, pb = bg.pa[i], bg.pb[i]
        h = np.linalg.norm(pb - pa)

        def f(t):
            p = pa + t * (pb - pa)
            return float(data.Phi(p[None, :])[0]) ** 2

        val, _ = quad(f, 0.0, 1.0, epsabs=1e-14, epsrel=1e-12)
        expected[bg.tri[i]] += diam[bg.tri[i]] * h * val
    assert np.allclose(est.per_element ** 2, expected, rtol=1e-9, atol=1e-16)


def test_estimator_constant_jump_is_silent():
    # (1/2 - K)1 = 1, so a constant jump U with zero solution leaves no
    # residual in any estimator contribution
    mesh = scaled_lshape()
    data = CoupledProblemData(U=lambda p: 2.0 * np.ones(len(np.atleast_2d(p))))
    sys = assemble_coupled(mesh, data)
    est = estimate(sys, np.zeros(sys.dim), data)
    assert est.total <= 1e-10


# -- marking -----------------------------------------------------------------


def test_mark_spec_examples():
    e = EstimatorResult(per_element=np.array([3.0, 1.0, 1.0, 1.0]))
    assert mark(e, 0.5).tolist() == [0]
    assert mark(e, 1.0).tolist() == [0, 1, 2, 3]
    e2 = EstimatorResult(per_element=np.array([2.0, 2.0, 2.0]))
    # theta = 0.4 needs 2.4, so one element is not enough; ties break
    # toward the lowest ids
    assert mark(e2, 0.4).tolist() == [0, 1]


def test_mark_theta_one_skips_zero_elements():
    e = EstimatorResult(per_element=np.array([1.0, 0.0, 2.0, 0.0]))
    assert mark(e, 1.0).tolist() == [0, 2]


def test_mark_tie_break_lowest_id():
    e = EstimatorResult(per_element=np.array([1.0, 2.0, 2.0, 1.0]))
    assert mark(e, 0.3).tolist() == [1]


def test_mark_all_zero_empty():
    m = mark(EstimatorResult(per_element=np.zeros(5)), 0.5)
    assert m.size == 0 and m.dtype == np.int64


def test_mark_errors():
    e = EstimatorResult(per_element=np.array([1.0, 2.0]))
    with pytest.raises(ValueError, match="theta"):
        mark(e, 0.0)
    with pytest.raises(ValueError, match="theta"):
        mark(e, 1.5)
    with pytest.raises(ValueError, match="marking"):
        mark(e, 0.5, marking="cubed")
    with pytest.raises(ValueError, match="nonnegative"):
        mark(EstimatorResult(per_element=np.array([1.0, -0.1])), 0.5)


@settings(deadline=None, max_examples=150)
@given(
    st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=1, max_size=12),
    st.floats(min_value=0.05, max_value=1.0),
    st.sampled_from(["linear", "squared"]),
)
def test_mark_doerfler_and_minimality(etas, theta, mode):
    eta = np.array(etas)
    m = mark(EstimatorResult(per_element=eta), theta, marking=mode)
    score = eta if mode == "linear" else eta ** 2
    total = score.sum()
    if total == 0.0:
        assert m.size == 0
        return
    need = theta * total - 1e-12 * total
    assert score[m].sum() >= need
    # minimality by exhaustive search over all subsets one smaller
    if len(m) > 0:
        for sub in itertools.combinations(range(len(eta)), len(m) - 1):
            assert score[list(sub)].sum() < need


# -- adaptive loop -----------------------------------------------------------


@pytest.fixture(scope="module")
def lshape_run():
    cfg = AdaptiveConfig(theta=0.3, d_grad=4, max_steps=10)
    return adaptive_loop(scaled_lshape(), unit_f_data(), cfg), cfg


def test_loop_zero_data_terminates_immediately():
    rec = adaptive_loop(scaled_lshape(), zero_data(), AdaptiveConfig())
    assert rec.n_steps == 1
    assert rec.eta[0] == 0.0
    assert rec.marked[0].size == 0


def test_loop_invalid_config():
    with pytest.raises(ValueError):
        adaptive_loop(scaled_lshape(), zero_data(), AdaptiveConfig(theta=0.0))
    with pytest.raises(ValueError):
        adaptive_loop(
            scaled_lshape(), zero_data(), AdaptiveConfig(marking="cubed")
        )


def test_loop_records_and_grading(lshape_run):
    rec, cfg = lshape_run
    gcfg = GradingConfig(d_grad=cfg.d_grad)
    assert rec.n_steps == cfg.max_steps + 1
    assert all(b > a for a, b in zip(rec.n_dofs, rec.n_dofs[1:]))
    for mesh in rec.meshes:
        assert grading_ok(mesh, gcfg)
    for est, m in zip(rec.estimators, rec.marked[:-1]):
        eta = est.per_element
        assert eta[m].sum() >= cfg.theta * eta.sum() - 1e-12 * eta.sum()
    assert rec.marked[-1].size == 0


def test_loop_estimator_mostly_decreasing(lshape_run):
    rec, _ = lshape_run
    eta = rec.eta
    dec = np.sum(eta[1:] < eta[:-1])
    assert dec >= 0.9 * (len(eta) - 1)


def test_loop_max_dofs_stop():
    cfg = AdaptiveConfig(theta=0.3, max_dofs=120, max_steps=30)
    rec = adaptive_loop(scaled_lshape(), unit_f_data(), cfg)
    assert rec.n_dofs[-1] >= 120
    assert all(n < 120 for n in rec.n_dofs[:-1])
    assert rec.marked[-1].size == 0


def test_record_rejects_non_increasing_dofs():
    rec = AdaptiveRunRecord(config=AdaptiveConfig())
    mesh = scaled_square()
    rec.append(mesh, np.zeros(3), EstimatorResult(np.zeros(2)), [], 10)
    with pytest.raises(RuntimeError, match="increase"):
        rec.append(mesh, np.zeros(3), EstimatorResult(np.zeros(2)), [], 10)


# -- cross-mesh energy distance ----------------------------------------------


def _affine_state(sys, a, b, c, g):
    """Coefficients of the affine volume function a + b x + c y paired
    with the boundary density g(x, y) (g linear, P1 on every panel)."""
    mesh = sys.mesh
    x = np.zeros(sys.dim)
    nv = mesh.n_vertices
    x[:nv] = a + b * mesh.coords[:, 0] + c * mesh.coords[:, 1]
    bg = sys.bg
    phi = np.column_stack([g(bg.pa), g(bg.pb)])
    x[sys.n1 :] = phi.ravel()
    return x


def test_x_distance_zero_for_shared_function():
    mc = scaled_lshape()
    mf = nvb_refine(mc, [0, 3])
    sc = assemble_coupled(mc, zero_data())
    sf = assemble_coupled(mf, zero_data())
    g = lambda p: 0.4 * np.atleast_2d(p)[:, 0] - np.atleast_2d(p)[:, 1]
    xc = _affine_state(sc, 1.0, 2.0, -0.5, g)
    xf = _affine_state(sf, 1.0, 2.0, -0.5, g)
    assert x_distance(sc, xc, sf, xf) <= 1e-13


def test_x_distance_affine_oracle():
    mc = scaled_lshape()
    mf = nvb_refine(mc, [1, 4])
    sc = assemble_coupled(mc, zero_data())
    sf = assemble_coupled(mf, zero_data())
    zg = lambda p: np.zeros(len(np.atleast_2d(p)))
    xc = _affine_state(sc, 0.3, -1.0, 2.0, zg)
    xf = _affine_state(sf, -0.2, 0.5, 1.0, zg)
    # difference is affine: integrate its H1 norm by exact quadrature
    da, db, dc = 0.5, -1.5, 1.0
    pts = np.einsum("qa,nab->nqb", TRI_POINTS, mc.coords[mc.tri])
    vals = da + db * pts[..., 0] + dc * pts[..., 1]
    l2 = float(mc.area @ ((vals ** 2) @ TRI_WEIGHTS))
    h1 = l2 + (db ** 2 + dc ** 2) * float(mc.area.sum())
    assert np.isclose(x_distance(sc, xc, sf, xf), np.sqrt(h1), rtol=1e-12)


def test_x_distance_density_part_uses_fine_gram():
    mc = scaled_lshape()
    mf = nvb_refine(mc, [2])
    sc = assemble_coupled(mc, zero_data())
    sf = assemble_coupled(mf, zero_data())
    g1 = lambda p: np.atleast_2d(p)[:, 0] + 0.2
    g2 = lambda p: -0.5 * np.atleast_2d(p)[:, 1]
    xc = _affine_state(sc, 0, 0, 0, g1)
    xf = _affine_state(sf, 0, 0, 0, g2)
    bg = sf.bg
    dphi = (np.column_stack([g2(bg.pa), g2(bg.pb)])
            - np.column_stack([g1(bg.pa), g1(bg.pb)])).ravel()
    expected = np.sqrt(dphi @ sf.Vb @ dphi)
    assert np.isclose(x_distance(sc, xc, sf, xf), expected, rtol=1e-11)


# -- batched boundary pairing ------------------------------------------------


class _FakeHosts:
    def __init__(self, segments):
        self.segments = segments


def test_batched_v_gram_matches_pairwise_blocks():
    # panels of very different sizes on two segments: identical pairs,
    # touching pairs, and far pairs in all three Gauss-order buckets
    rng = np.random.default_rng(5)
    segs = [
        (0, 1, np.array([0.0, 0.0]), np.array([0.4, 0.0]), 0.4),
        (2, 3, np.array([0.5, 0.31]), np.array([0.1, 0.33]), 0.4002),
    ]
    bh = _FakeHosts(segs)
    breaks0 = [0.0, 0.03, 0.06, 0.25, 1.0]
    breaks1 = [0.0, 0.5, 0.55, 1.0]
    sets = []
    for s, br in ((0, breaks0), (1, breaks1)):
        for t0, t1 in zip(br, br[1:]):
            sets.append(
                PanelSet(
                    seg=np.array([s]), t0=np.array([t0]), t1=np.array([t1]),
                    C=rng.standard_normal((1, 2)),
                )
            )
    px = _collect_panels(bh, sets, 2)
    got = _v_gram(px, len(sets))
    exact = np.zeros_like(got)
    for i in range(px.n):
        for j in range(px.n):
            B = pair_v_block(px.pa[i], px.pb[i], px.pa[j], px.pb[j])
            exact[px.owner[i], px.owner[j]] += px.C[i] @ B @ px.C[j]
    scale = np.abs(exact).max()
    assert np.abs(got - exact).max() <= 1e-8 * scale
    assert np.abs(got - got.T).max() == 0.0


# -- hierarchical energy bookkeeping -----------------------------------------


@pytest.fixture(scope="module")
def hier_system(lshape_run):
    rec, _ = lshape_run
    short = AdaptiveRunRecord(config=rec.config)
    for i in range(6):
        short.append(
            rec.meshes[i], rec.solutions[i], rec.estimators[i],
            rec.marked[i], rec.n_dofs[i],
        )
    hier = uniform_hierarchy(rec.meshes[0], 1, 0)
    hb = hierarchical_basis(hier, short.meshes)
    hs = assemble_hierarchical(hb, unit_f_data(), short.meshes[-1])
    return short, hs


def test_hier_sections_strictly_increasing(hier_system):
    _, hs = hier_system
    assert all(b > a for a, b in zip(hs.n_l, hs.n_l[1:]))
    assert hs.n_l[-1] == hs.dim


def test_hier_gram_spd(hier_system):
    _, hs = hier_system
    w = np.linalg.eigvalsh(hs.G)
    assert w.min() > 0.0
    assert np.abs(hs.G - hs.G.T).max() == 0.0


def test_hier_density_section_dims_match_nodal(hier_system):
    # the density sections reproduce the dimension of the per-step
    # piecewise-P1 boundary spaces exactly
    rec, hs = hier_system
    for j, mesh in enumerate(rec.meshes):
        nd = int(np.sum(hs.kind[: hs.n_l[j]] == "density"))
        # constants plus derivative densities minus the dependent one per
        # boundary loop add up to the nodal piecewise-P1 dimension
        assert nd == 2 * boundary_geom(mesh).n_panels


def test_hier_volume_sections_contain_nodal_space(hier_system):
    # rank test: adding the nodal S2+ interpolant of any polynomial up
    # to degree 2 to a section does not increase its span; here via the
    # manufactured quadratic reproduced exactly (see below), plus
    # dimension counting: sections may only be larger than the nodal
    # spaces (coarse bubbles persist after refinement)
    rec, hs = hier_system
    for j, mesh in enumerate(rec.meshes):
        nv = int(np.sum(hs.kind[: hs.n_l[j]] == "volume"))
        assert nv >= S2PlusBasis(mesh).dim


def test_hier_section_galerkin_orthogonality(hier_system):
    _, hs = hier_system
    sols = hs.section_solutions()
    fn = np.linalg.norm(hs.f)
    for j, n in enumerate(hs.n_l):
        r = hs.f - hs.M @ sols[j]
        assert np.abs(r[:n]).max() <= 1e-10 * fn


def test_hier_reference_error_vanishes_at_final_step(hier_system):
    rec, hs = hier_system
    inc, ref = energy_norms(rec, hs)
    assert ref[-1] == 0.0
    assert np.all(inc >= -1e-15)
    assert np.all(ref >= -1e-15)


def test_hier_telescoping_lower_bound(hier_system):
    rec, hs = hier_system
    inc, ref = rec.increments, rec.ref_errors
    assert inc.sum() >= ref[0] / 20.0


def test_hier_qo_ratios_bounded(hier_system):
    rec, hs = hier_system
    q = qo_ratios(rec.increments, rec.ref_errors)
    finite = q[np.isfinite(q)]
    assert finite.size > 0
    assert np.all(finite > 1.0 / 50.0)
    assert np.all(finite < 50.0)


def test_symmetric_surrogate_pythagoras(hier_system):
    # with the symmetric elliptic Gram matrix as the system and a
    # generic load, Galerkin orthogonality makes the telescoping sum
    # exact (the F = 1 load is useless here: the moment conditions of
    # the corrected basis annihilate it beyond the coarsest section)
    _, hs = hier_system
    rng = np.random.default_rng(17)
    f = rng.standard_normal(hs.dim)
    sols = section_solutions(hs.G, f, hs.n_l)
    inc = increment_energies(sols, hs.G)
    ref = reference_errors(sols, hs.G)
    tails = np.cumsum(inc[::-1])[::-1]
    for l in range(len(inc)):
        assert np.isclose(tails[l], ref[l], rtol=1e-10, atol=1e-14 * ref[0])


def test_energy_norms_step_mismatch_raises(hier_system):
    rec, hs = hier_system
    shorter = AdaptiveRunRecord(config=rec.config)
    for i in range(rec.n_steps - 1):
        shorter.append(
            rec.meshes[i], rec.solutions[i], rec.estimators[i],
            rec.marked[i], rec.n_dofs[i],
        )
    with pytest.raises(RuntimeError, match="steps"):
        energy_norms(shorter, hs)


def test_hier_scale_check_rejects_large_domain():
    from ajn.solver import _hier_scale_check

    segs = [
        (0, 1, np.array([0.0, 0.0]), np.array([1.2, 0.0]), 1.2),
        (1, 0, np.array([1.2, 0.0]), np.array([0.0, 0.0]), 1.2),
    ]
    with pytest.raises(ValueError, match="rescale"):
        _hier_scale_check(_FakeHosts(segs))


def test_hier_manufactured_quadratic_exact_in_every_section():
    # u* = x^2 - y^2 + 3 with phi = 0 is representable in every section,
    # so each section solution reproduces it and all increments vanish
    data, uex = manufactured_quadratic_data()
    cfg = AdaptiveConfig(theta=0.3, d_grad=4, max_steps=4)
    rec = adaptive_loop(scaled_lshape(), unit_f_data(), cfg)
    hier = uniform_hierarchy(rec.meshes[0], 1, 0)
    hb = hierarchical_basis(hier, rec.meshes)
    hs = assemble_hierarchical(hb, data, rec.meshes[-1])
    sols = hs.section_solutions()
    scale = np.abs(sols[-1]).max()

    # density coefficients vanish in all sections
    dens = hs.kind == "density"
    assert np.abs(sols[:, dens]).max() <= 1e-9 * scale

    # increments and reference errors vanish
    inc = increment_energies(sols, hs.G)
    ref = reference_errors(sols, hs.G)
    assert np.abs(inc).max() <= 1e-16 * max(np.abs(hs.f).max(), 1.0)
    assert np.abs(ref).max() <= 1e-16 * max(np.abs(hs.f).max(), 1.0)

    # the coarsest section solution equals u* pointwise
    vol_idx = [j for (k, j) in hb.order if k == "volume"]
    forest = hb.forest
    mesh = rec.meshes[-1]
    eids = mesh.element_ids[:5]
    pts = np.einsum(
        "qa,nab->nqb", TRI_POINTS, mesh.coords[mesh.tri[:5]]
    )
    vals = np.zeros(pts.shape[:2])
    for col, j in enumerate(vol_idx):
        pos = [i for i, key in enumerate(hb.order) if key == ("volume", j)][0]
        c = sols[0][pos]
        if c == 0.0:
            continue
        vals += c * values_on(forest, hb.volume[j].elems, eids, TRI_POINTS)
    exact = uex(pts.reshape(-1, 2)).reshape(vals.shape)
    assert np.abs(vals - exact).max() <= 1e-8 * np.abs(exact).max()


# -- axiom probes ------------------------------------------------------------


def test_a1_stability_probe():
    # |sqrt(sum_S eta^2(fine)) - sqrt(sum_S eta^2(coarse))| <= C |u_f - u_c|_X
    # over 20 random refinements; one moderate fitted constant covers all
    data = unit_f_data()
    base = nvb_refine(scaled_lshape(), range(6))
    sys_c = assemble_coupled(base, data)
    x_c = solve(sys_c)
    est_c = estimate(sys_c, x_c, data)
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(20):
        marked = rng.choice(
            base.n_elements, size=rng.integers(1, 6), replace=False
        )
        fine = nvb_refine(base, marked)
        fset = set(int(e) for e in fine.element_ids)
        keep = [i for i, e in enumerate(base.element_ids) if int(e) in fset]
        sys_f = assemble_coupled(fine, data)
        x_f = solve(sys_f)
        est_f = estimate(sys_f, x_f, data)
        loc = {int(e): i for i, e in enumerate(fine.element_ids)}
        sf = np.sqrt(sum(
            est_f.per_element[loc[int(base.element_ids[i])]] ** 2 for i in keep
        ))
        sc = np.sqrt(float(np.sum(est_c.per_element[keep] ** 2)))
        dist = x_distance(sys_c, x_c, sys_f, x_f)
        ratios.append(abs(sf - sc) / dist)
    ratios = np.array(ratios)
    # measured constant is about 0.6; assert a single fitted constant
    # covers every refinement with margin
    assert ratios.max() <= 2.0


def test_a4_discrete_reliability_probe():
    # |u_{l+1} - u_l|_X^2 <= C sum_{T in omega(refined)} eta_T^2 along a
    # run; C fitted on the first refinement.  The run starts from a
    # uniformly refined root so the fit happens in the resolved regime:
    # on very coarse roots the realized ratio still swings 4-6x through
    # the first transient steps before settling
    data = unit_f_data()
    root = scaled_lshape()
    for _ in range(3):
        root = nvb_refine(root, np.arange(root.n_elements))
    cfg = AdaptiveConfig(theta=0.3, d_grad=4, max_steps=10, max_dofs=2500)
    rec = adaptive_loop(root, data, cfg)
    syss = [assemble_coupled(m, data) for m in rec.meshes]
    ratios = []
    for l in range(rec.n_steps - 1):
        mc, mf = rec.meshes[l], rec.meshes[l + 1]
        fset = set(int(e) for e in mf.element_ids)
        refined = [i for i, e in enumerate(mc.element_ids) if int(e) not in fset]
        om = sorted(patch(mc, refined, 1))
        eta2 = float(np.sum(rec.estimators[l].per_element[om] ** 2))
        d = x_distance(syss[l], rec.solutions[l], syss[l + 1], rec.solutions[l + 1])
        ratios.append(d * d / eta2)
    ratios = np.array(ratios)
    C = ratios[0]
    assert np.all(ratios <= 3.0 * C)
