"""Objective, constraint and penalty evaluation with adjoint design derivatives.

Geometry and material terms are differentiated with respect to the corner
level-set values of each element by a complex step through the element
kernels of :mod:`thbtopo.analysis`; the chain rule through the corner
evaluation matrix of the design basis then gives derivatives with respect
to the level-set coefficients.  The regularisation penalties are integrated
over whole elements and differentiated analytically.
"""
from __future__ import annotations

import dataclasses
from typing import Dict, Optional

import numpy as np

from .analysis import Solution, XfemModel
from .basis import ThbBasis, quadrature_points
from .geom import COMBINED, LonField, SchemeParams, interface_weight

CSTEP = 1e-30


@dataclasses.dataclass
class FunctionalParams:
    w_s: float = 0.9
    w_m: float = 0.0
    c_p: float = 0.025
    c_phi: float = 0.5
    c_m: float = 0.4
    S0: float = 59.12
    M0: float = 1.0
    P0: float = 6.0
    phi_target: float = 0.15
    grad_target: float = 0.75
    I_max: float = 1.0
    gamma_I: float = 4.61
    alpha: tuple = (0.5, 0.5, 0.5)


@dataclasses.dataclass
class ObjectiveBreakdown:
    S: float
    M_A: float
    P_p: float
    P_phi: float
    P_grad: float
    Z: float
    total: float
    g_mass: float

    FIELDS = ("S", "M_A", "P_p", "P_phi", "P_grad", "total", "g_mass")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


# ---------------------------------------------------------------- penalties

class PenaltyQuadrature:
    """Gauss rule over all active elements with cached basis values, gradients and LoN weights."""

    def __init__(self, basis: ThbBasis, lon: Optional[LonField] = None, fp: Optional[FunctionalParams] = None):
        mesh = basis.mesh
        nq = basis.degree + 1
        self.pts, self.w = quadrature_points(mesh.bboxes, nq)
        elems = np.repeat(np.arange(mesh.n_active), nq * nq)
        self.V, self.Dx, self.Dy = basis.eval_matrix(self.pts, elems, deriv=True)
        self.weight = np.ones(len(self.w))
        if lon is not None:
            fp = fp or FunctionalParams()
            bb = mesh.bboxes[elems]
            t = (self.pts - bb[:, :2]) / (bb[:, 2:] - bb[:, :2])
            Ic = lon.element_values(mesh)[elems]
            tx, ty = t[:, 0], t[:, 1]
            I = ((1 - tx) * (1 - ty) * Ic[:, 0] + tx * (1 - ty) * Ic[:, 1]
                 + tx * ty * Ic[:, 2] + (1 - tx) * ty * Ic[:, 3])
            self.weight = interface_weight(I, lon.I_max, fp.gamma_I)


def penalties(quad: PenaltyQuadrature, phi_coef, fp: FunctionalParams):
    """``(P_phi, P_grad, dP_phi/dc, dP_grad/dc)`` for level-set coefficients ``phi_coef``."""
    a1, a2, a3 = fp.alpha
    w = quad.weight
    phi = quad.V @ phi_coef
    gx = quad.Dx @ phi_coef
    gy = quad.Dy @ phi_coef
    r = phi / fp.phi_target - np.sign(phi)
    P_phi = float(np.sum(quad.w * a1 * (1 - w) * r ** 2))
    d_phi = quad.V.T @ (quad.w * a1 * (1 - w) * 2 * r / fp.phi_target)
    g = np.hypot(gx, gy)
    q = g / fp.grad_target - 1.0
    P_grad = float(np.sum(quad.w * (a2 * w * q ** 2 + a3 * (1 - w) * g ** 2)))
    gs = np.where(g > 0, g, 1.0)
    coef = quad.w * (a2 * w * 2 * q / (fp.grad_target * gs) * (g > 0) + a3 * (1 - w) * 2)
    d_grad = quad.Dx.T @ (coef * gx) + quad.Dy.T @ (coef * gy)
    return P_phi, P_grad, d_phi, d_grad


# ---------------------------------------------------------- element terms

def _local(vec, dofs):
    return np.where(dofs >= 0, vec[np.maximum(dofs, 0)], 0.0)


def _quad_form(dofs, mats, a, b):
    if not len(dofs):
        return np.zeros(0, dtype=mats.dtype)
    return np.einsum("ti,tij,tj->t", _local(a, dofs), mats, _local(b, dofs))


def _lin_form(dofs, vecs, a):
    if not len(dofs):
        return np.zeros(0, dtype=vecs.dtype)
    return np.einsum("ti,ti->t", _local(a, dofs), vecs)


def _scatter(owner, vals, n):
    return np.bincount(owner, weights=vals, minlength=n) if len(owner) else np.zeros(n)


def _state_functionals(model: XfemModel, terms, u):
    n = model.mesh.n_active
    # island springs store energy too; without it a load cut off from the supports looks free
    S_el = 0.5 * _scatter(terms.bulk_owner, np.real(_quad_form(terms.bulk_dofs, terms.bulk_K, u, u)), n)
    S_el += 0.5 * _scatter(terms.spring_owner, np.real(_quad_form(terms.spring_dofs, terms.spring_K, u, u)), n)
    return S_el


def residual_contraction(model: XfemModel, terms, u, lam):
    """Per-element ``lam . (K u - f)`` over every local term (complex if the terms are)."""
    n = model.mesh.n_active
    out = np.zeros(n, dtype=terms.bulk_K.dtype)
    for owner, dofs, mats in ((terms.bulk_owner, terms.bulk_dofs, terms.bulk_K),
                              (terms.spring_owner, terms.spring_dofs, terms.spring_K),
                              (terms.bnd_owner, terms.bnd_dofs, terms.bnd_K),
                              (terms.ghost_owner, terms.ghost_dofs, terms.ghost_K)):
        if len(owner):
            np.add.at(out, owner, _quad_form(dofs, mats, lam, u))
    if len(terms.bnd_owner):
        np.add.at(out, terms.bnd_owner, -_lin_form(terms.bnd_dofs, terms.bnd_f, lam))
    return out


def evaluate(model: XfemModel, solution: Solution, quad: PenaltyQuadrature, phi_coef,
             fp: FunctionalParams, total_mass: float, terms=None):
    """Objective breakdown of a solved design."""
    t = model.terms() if terms is None else terms
    u = solution.u
    S = float(np.sum(_state_functionals(model, t, u)))
    M_A = float(np.real(t.tri_mass.sum()))
    P_p = float(np.real(t.seg_len.sum()))
    P_phi, P_grad, _, _ = penalties(quad, phi_coef, fp)
    return _breakdown(S, M_A, P_p, P_phi, P_grad, fp, total_mass)


def _breakdown(S, M_A, P_p, P_phi, P_grad, fp, total_mass):
    Z = fp.w_s * S / fp.S0 + fp.w_m * M_A / fp.M0
    total = Z + fp.c_p * P_p / fp.P0 + fp.c_phi * (P_phi + P_grad) / fp.P0
    return ObjectiveBreakdown(S, M_A, P_p, P_phi, P_grad, Z, total, M_A / total_mass - fp.c_m)


def adjoint_solve(solution: Solution, dF_du) -> np.ndarray:
    """Adjoint vector: solves ``K^T lam = dF/du`` with the forward factorisation."""
    rhs = np.asarray(dF_du, dtype=float)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return solution.solve_adjoint(rhs)


def corner_gradients(model: XfemModel, solution: Solution, lam_S=None, h: float = CSTEP) -> Dict[str, np.ndarray]:
    """Total derivatives of S, M^A and P_p with respect to the corner values, each ``(n, 4)``.

    ``lam_S`` is the adjoint of the strain energy; computed if not supplied.
    """
    dec = model.dec
    u = solution.u
    K_bulk = solution.system.K_bulk
    if lam_S is None:
        lam_S = adjoint_solve(solution, K_bulk @ u)
    n = model.mesh.n_active
    out = {k: np.zeros((n, 4)) for k in ("S", "M_A", "P_p")}
    for c in range(4):
        phi = dec.phi.astype(complex)
        phi[:, c] += 1j * h
        t = model.terms(phi)
        S_exp = (0.5 * _scatter(t.bulk_owner, np.imag(_quad_form(t.bulk_dofs, t.bulk_K, u, u)), n)
                 + 0.5 * _scatter(t.spring_owner, np.imag(_quad_form(t.spring_dofs, t.spring_K, u, u)), n))
        adj = np.imag(residual_contraction(model, t, u, lam_S))
        out["S"][:, c] = (S_exp - adj) / h
        out["M_A"][:, c] = _scatter(t.tri_owner, np.imag(t.tri_mass), n) / h
        out["P_p"][:, c] = _scatter(t.seg_owner, np.imag(t.seg_len), n) / h
    for v in out.values():
        v[dec.snapped] = 0.0
    return out


@dataclasses.dataclass
class Gradients:
    """Derivatives with respect to the design variables."""

    S: np.ndarray
    M_A: np.ndarray
    P_p: np.ndarray
    P_phi: np.ndarray
    P_grad: np.ndarray
    total: np.ndarray
    g_mass: np.ndarray


def total_gradient(model: XfemModel, solution: Solution, basis: ThbBasis, quad: PenaltyQuadrature, phi_coef,
                   scheme: SchemeParams, fp: FunctionalParams, total_mass: float, corner_matrix=None) -> Gradients:
    """Design derivatives of every functional: geometric and material terms by adjoint, penalties analytically."""
    A = basis.corner_matrix() if corner_matrix is None else corner_matrix
    cg = corner_gradients(model, solution)
    dphi_ds = -scheme.phi_scale if scheme.scheme == COMBINED else 1.0
    d = {k: dphi_ds * (A.T @ v.ravel()) for k, v in cg.items()}
    _, _, dPphi, dPgrad = penalties(quad, phi_coef, fp)
    d["P_phi"] = dphi_ds * dPphi
    d["P_grad"] = dphi_ds * dPgrad
    total = (fp.w_s * d["S"] / fp.S0 + fp.w_m * d["M_A"] / fp.M0 + fp.c_p * d["P_p"] / fp.P0
             + fp.c_phi * (d["P_phi"] + d["P_grad"]) / fp.P0)
    return Gradients(d["S"], d["M_A"], d["P_p"], d["P_phi"], d["P_grad"], total, d["M_A"] / total_mass)


__all__ = ["FunctionalParams", "ObjectiveBreakdown", "PenaltyQuadrature", "penalties", "evaluate",
           "adjoint_solve", "corner_gradients", "total_gradient", "Gradients", "residual_contraction"]
