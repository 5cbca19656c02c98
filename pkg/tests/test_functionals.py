import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from thbtopo.analysis import BoundaryConditions, DirichletSegment, ElasticParams, NeumannSegment, XfemModel, solve
from thbtopo.basis import ThbBasis, quadrature_points
from thbtopo.driver import Evaluator, RunConfig, design_box, functional_params, scheme_params
from thbtopo.functionals import (FunctionalParams, PenaltyQuadrature, adjoint_solve, evaluate, penalties,
                                 total_gradient)
from thbtopo.geom import COMBINED, PLAIN, SchemeParams, decompose_cut_elements
from thbtopo.hmesh import create_background_mesh

KEYS = ("S", "M_A", "P_p", "P_phi", "P_grad", "g_mass")


def beam_evaluator(scheme):
    cfg = RunConfig(length=4.0, nx=20, ny=10, l0=0, l_ifc_max=0, l_solid_max=0, l_min=0, scheme=scheme, S0=1.0)
    mesh = create_background_mesh(cfg.nx, cfg.ny, cfg.domain)
    basis = ThbBasis(mesh, 2, "THB")
    sch = scheme_params(cfg, 0.6)
    return cfg, mesh, basis, Evaluator(mesh, basis, cfg, sch, functional_params(cfg))


def project(mesh, basis, f):
    q, w = quadrature_points(mesh.bboxes, 4)
    P = basis.eval_matrix(q)
    return spla.spsolve((P.T @ sp.diags(w) @ P).tocsc(), P.T @ (w * f(q)))


def holes(xy):
    """Two interior holes: the load path between the supports stays connected."""
    return (0.3 - 0.9 * np.exp(-((xy[:, 0] - 0.7) ** 2 + (xy[:, 1] - 0.5) ** 2) / 0.05)
            - 0.9 * np.exp(-((xy[:, 0] - 1.5) ** 2 + (xy[:, 1] - 0.45) ** 2) / 0.04))


def design(scheme, cut, mesh, basis, cfg):
    if cut:
        c = project(mesh, basis, holes)
        s = np.clip(0.5 + 0.8 * c, 0, 1) if scheme == COMBINED else -0.2 * c
    else:  # no interface; intermediate densities in the combined scheme
        c = project(mesh, basis, lambda xy: 0.2 * np.sin(2 * xy[:, 0]) * np.cos(3 * xy[:, 1]))
        s = 0.75 + c if scheme == COMBINED else -0.1 + 0.2 * c
    lo, hi = design_box(cfg, basis)
    return np.clip(s, lo, hi), lo, hi


def fd_errors(scheme, cut, n_vars=20, seed=3):
    cfg, mesh, basis, ev = beam_evaluator(scheme)
    s, lo, hi = design(scheme, cut, mesh, basis, cfg)
    res = ev(s)
    free = np.flatnonzero(hi > lo)
    idx = np.random.default_rng(seed).choice(free, n_vars, replace=False)
    step = 1e-6 * (hi[idx] - lo[idx])
    fd = {k: np.zeros(n_vars) for k in KEYS}
    for j, (i, h) in enumerate(zip(idx, step)):
        sp_, sm = s.copy(), s.copy()
        sp_[i] += h
        sm[i] -= h
        bp = ev(sp_, gradients=False).breakdown
        bm = ev(sm, gradients=False).breakdown
        for k in KEYS:
            fd[k][j] = (getattr(bp, k) - getattr(bm, k)) / (2 * h)
    out = {}
    for k in KEYS:
        ad = getattr(res.gradients, k)[idx]
        scale = np.abs(ad).max()
        out[k] = (np.abs(fd[k] - ad).max() / scale) if scale > 0 else np.abs(fd[k]).max()
    return out, res


@pytest.mark.parametrize("scheme", [COMBINED, PLAIN])
@pytest.mark.parametrize("cut", [True, False])
def test_gradients_match_finite_differences(scheme, cut):
    errs, res = fd_errors(scheme, cut)
    print(scheme, "cut" if cut else "uncut", {k: f"{v:.1e}" for k, v in errs.items()})
    if cut:
        assert res.model.dec.intersected.any()
    for k, v in errs.items():
        assert v < 1e-4, (k, v)


# ------------------------------------------------------------------ adjoint

def small_problem():
    m = create_background_mesh(6, 3, ((0, 2), (0, 1)))
    dec = decompose_cut_elements(m, -np.ones((m.n_active, 4)))
    bcs = BoundaryConditions(dirichlet=[DirichletSegment(3, 0, 1, (0, 0))],
                             neumann=[NeumannSegment(1, 0, 1, (0.0, -1.0))])
    model = XfemModel(m, dec, ElasticParams(), bcs)
    return model, solve(model.system())


def test_adjoint_of_energy_is_state():
    model, sol = small_problem()
    K = sol.system.K
    lam = adjoint_solve(sol, K @ sol.u)
    assert np.allclose(lam, sol.u, rtol=1e-10, atol=1e-12 * np.abs(sol.u).max())


def test_adjoint_of_state_independent_functional_is_zero():
    _, sol = small_problem()
    assert np.all(adjoint_solve(sol, np.zeros(sol.system.n_dofs)) == 0)


def test_adjoint_random_linear_functional():
    _, sol = small_problem()
    c = np.random.default_rng(0).normal(size=sol.system.n_dofs)
    lam = adjoint_solve(sol, c)
    assert np.linalg.norm(sol.system.K.T @ lam - c) < 1e-12 * np.linalg.norm(c)


# ---------------------------------------------------------------- functionals

def test_full_solid_mass_and_perimeter():
    m = create_background_mesh(6, 3, ((0, 2), (0, 1)))
    basis = ThbBasis(m, 2, "THB")
    scheme = SchemeParams(COMBINED, phi_scale=0.5)
    s = np.ones(basis.n_functions)
    phi = scheme.phi_from_s(s)
    dec = decompose_cut_elements(m, (basis.corner_matrix() @ phi).reshape(-1, 4))
    bcs = BoundaryConditions(dirichlet=[DirichletSegment(3, 0, 1, (0, 0))])
    model = XfemModel(m, dec, ElasticParams(material=scheme), bcs)
    fp = FunctionalParams()
    bd = evaluate(model, solve(model.system()), PenaltyQuadrature(basis), phi, fp, 2.0)
    assert np.isclose(bd.M_A, 2.0, rtol=1e-12) and bd.P_p == 0.0
    assert np.isclose(bd.g_mass, 1.0 - fp.c_m)


def test_penalties_vanish_on_target_profile():
    # linear field through mid-element: exactly +-phi_target at the nodes next to the interface
    h = 0.125
    m = create_background_mesh(8, 2, ((0, 1), (0, h * 2)))
    basis = ThbBasis(m, 1, "THB")
    fp = FunctionalParams(phi_target=0.1, grad_target=0.1 / (h / 2))
    x0 = 0.4375
    xn = (basis.fn_anchor[:, 0] + 1) * h
    coef = np.clip((xn - x0) * fp.grad_target, -fp.phi_target, fp.phi_target)
    quad = PenaltyQuadrature(basis)
    quad.weight = (np.abs(quad.pts[:, 0] - x0) < h / 2).astype(float)  # band indicator
    P_phi, P_grad, _, _ = penalties(quad, coef, fp)
    assert P_phi + P_grad < 1e-6 * 0.25
    # away from the target the penalties are positive
    P_phi2, P_grad2, _, _ = penalties(quad, 2 * coef, fp)
    assert P_phi2 > 1e-3 and P_grad2 > 1e-3


def test_far_void_variable_has_no_compliance_gradient():
    cfg, mesh, basis, ev = beam_evaluator(COMBINED)
    box = basis.support_boxes()
    s = np.ones(basis.n_functions)
    far = (box[:, 0] >= 0.6) & (box[:, 2] <= 1.2) & (box[:, 1] >= 0.3) & (box[:, 3] <= 0.8)
    ring = (box[:, 2] > 0.3) & (box[:, 0] < 1.5) & (box[:, 3] > 0.1) & (box[:, 1] < 0.95)
    s[ring] = 0.0  # void region around the probed functions
    res = ev(s)
    i = np.flatnonzero(far)
    assert len(i)
    assert np.all(res.gradients.S[i] == 0)
    assert np.all(res.gradients.M_A[i] == 0)


def test_mass_gradient_of_straight_interface():
    # linear design basis; interface x = x0 through element mid-lines is resolved exactly
    m = create_background_mesh(4, 4, ((0, 1), (0, 1)))
    basis = ThbBasis(m, 1, "THB")
    h, x0 = 0.25, 0.375
    xn, yn = ((basis.fn_anchor + 1) * h).T  # nodal points of the linear functions
    coef = xn - x0
    scheme = SchemeParams(PLAIN)
    dec = decompose_cut_elements(m, (basis.corner_matrix() @ coef).reshape(-1, 4))
    bcs = BoundaryConditions(dirichlet=[DirichletSegment(3, 0, 1, (0, 0))])
    model = XfemModel(m, dec, ElasticParams(material=scheme), bcs)
    sol = solve(model.system())
    fp = FunctionalParams()
    g = total_gradient(model, sol, basis, PenaltyQuadrature(basis), coef, scheme, fp, 1.0)
    # swept area: dM/dc_i = -int_Gamma B_i / |grad phi| = -0.5 * (h or h/2 at the edges)
    edge = np.isclose(yn, 0) | np.isclose(yn, 1)
    expected = np.where(np.isclose(np.abs(xn - x0), h / 2), -0.5 * np.where(edge, h / 2, h), 0.0)
    assert np.abs(g.M_A - expected).max() < 1e-6
