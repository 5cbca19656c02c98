"""Design-to-material mapping, hole seeding, cut-element decomposition and level of neighbourhood.

Every active element is split into four triangles around its centroid
(corners ``k``, ``k + 1`` and the centroid, whose level-set value is the mean
of the corners).  Each triangle is cut by the linear interface into at most
three sub-triangles.  The topology of the split depends only on the signs of
the five nodal values, so it is tabulated once for the 32 sign patterns and
the geometry is recomputed from the (possibly complex) nodal values when
derivatives are needed.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import ThbBasis, quadrature_points
from .hmesh import HierarchicalMesh, intersected_mask

PLAIN = "plain"
COMBINED = "combined"
SOLID, VOID = 0, 1


class GeometryError(ValueError):
    pass


# ------------------------------------------------------------ material model

@dataclasses.dataclass
class SchemeParams:
    scheme: str = COMBINED
    phi_scale: float = 0.5
    phi_thres: float = 0.5
    rho_shift: float = 0.2
    rho0: float = 1.0
    E0: float = 1.0
    beta: float = 2.0

    def phi_from_s(self, s):
        return self.phi_scale * (self.phi_thres - s)

    def s_from_phi(self, phi):
        return self.phi_thres - phi / self.phi_scale

    def rho(self, s):
        """Density of the solid phase; zero below the threshold (complex-step safe)."""
        if self.scheme == PLAIN:
            return self.rho0 * np.ones_like(s)
        lin = self.rho_shift + (self.rho0 - self.rho_shift) * (s - self.phi_thres) / (1.0 - self.phi_thres)
        return np.where(np.real(s) < self.phi_thres, 0.0 * s, lin)

    def youngs(self, s):
        if self.scheme == PLAIN:
            return self.E0 * np.ones_like(s)
        return self.E0 * self.rho(s) ** self.beta


@dataclasses.dataclass
class MaterialFields:
    phi_coeffs: np.ndarray
    params: SchemeParams

    def rho(self, s_values):
        return self.params.rho(np.asarray(s_values))

    def E(self, s_values):
        return self.params.youngs(np.asarray(s_values))


def material_fields(s, params: SchemeParams) -> MaterialFields:
    """Level-set coefficients and pointwise density/stiffness rules of a design vector."""
    s = np.asarray(s, dtype=float)
    if params.scheme == COMBINED:
        return MaterialFields(params.phi_from_s(s), params)
    return MaterialFields(s.copy(), params)


def snap(phi, eps: float):
    """Move values with ``|phi| < eps`` to ``+-eps`` keeping the sign (0 counts as +)."""
    phi = np.array(phi, copy=True)
    small = np.abs(np.real(phi)) < eps
    phi[small] = np.where(np.real(phi[small]) < 0, -eps, eps)
    return phi, small


# --------------------------------------------------------- pattern tables

def _build_tables():
    """Per sign pattern of (corner0..3, centroid): sub-triangles, segments and pieces."""
    tables = []
    for code in range(32):
        neg = [(code >> v) & 1 == 1 for v in range(5)]  # bit set: phi < 0 (solid)
        tris, segs = [], []
        for k in range(4):
            v = (k, (k + 1) % 4, 4)
            ns = [neg[a] for a in v]
            if all(ns) or not any(ns):
                tris.append((k, SOLID if ns[0] else VOID, ((v[0], v[0]), (v[1], v[1]), (v[2], v[2]))))
                continue
            lone = ns.index(True) if sum(ns) == 1 else ns.index(False)
            X, Y, Z = v[lone], v[(lone + 1) % 3], v[(lone + 2) % 3]
            P, Q = (X, Y), (X, Z)
            xp = SOLID if neg[X] else VOID
            op = VOID if xp == SOLID else SOLID
            tris.append((k, xp, ((X, X), P, Q)))
            tris.append((k, op, (P, (Y, Y), (Z, Z))))
            tris.append((k, op, (P, (Z, Z), Q)))
            segs.append((k, (P, Q) if xp == SOLID else (Q, P)))
        has = [any(neg[a] for a in (k, (k + 1) % 4, 4)) for k in range(4)]
        label = list(range(4))
        for _ in range(4):
            for k in range(4):
                k2 = (k + 1) % 4
                if has[k] and has[k2] and (neg[k2] or neg[4]):
                    m = min(label[k], label[k2])
                    label[k] = label[k2] = m
        uniq = sorted({label[k] for k in range(4) if has[k]})
        piece = [uniq.index(label[k]) if has[k] else -1 for k in range(4)]
        tables.append(dict(tris=tris, segs=segs, piece=piece, n_pieces=len(uniq)))
    return tables


_TABLES = _build_tables()


def _vertex(Xc, phic, desc):
    """Coordinates of vertex descriptors ``(a, b)``: node ``a`` or the zero of phi on edge a-b."""
    a, b = desc[..., 0], desc[..., 1]
    pa = np.take_along_axis(phic, a, axis=1)
    pb = np.take_along_axis(phic, b, axis=1)
    same = a == b
    den = np.where(same, 1.0, pa - pb)
    t = np.where(same, 0.0, pa / den)
    xa = np.take_along_axis(Xc, a[..., None], axis=1)
    xb = np.take_along_axis(Xc, b[..., None], axis=1)
    return xa + t[..., None] * (xb - xa)


@dataclasses.dataclass
class CutDecomposition:
    """Triangulation of all active elements into solid/void sub-triangles.

    Triangle and segment vertices are stored as descriptors into the five
    element nodes; :meth:`geometry` turns them into coordinates for any nodal
    values with the same sign pattern.
    """

    mesh: HierarchicalMesh
    phi: np.ndarray            # (n, 4) snapped corner values
    snapped: np.ndarray        # (n, 4) bool
    eps: float
    code: np.ndarray           # (n,) sign pattern
    intersected: np.ndarray    # (n,) bool
    tri_elem: np.ndarray
    tri_sub: np.ndarray
    tri_phase: np.ndarray
    tri_desc: np.ndarray       # (m, 3, 2)
    tri_piece: np.ndarray      # global piece id for solid triangles, -1 for void
    seg_elem: np.ndarray
    seg_desc: np.ndarray       # (s, 2, 2)
    seg_piece: np.ndarray
    piece_elem: np.ndarray     # (n_pieces,)
    elem_piece: np.ndarray     # (n, 4) global piece of each centroid triangle, -1 if no solid

    @property
    def n_pieces(self) -> int:
        return len(self.piece_elem)

    def nodes5(self, phi=None):
        """Corner plus centroid coordinates and values, ``(n, 5, 2)`` and ``(n, 5)``."""
        phi = self.phi if phi is None else phi
        X = self.mesh.corners
        Xc = np.concatenate([X, X.mean(axis=1, keepdims=True)], axis=1)
        phic = np.concatenate([phi, phi.mean(axis=1, keepdims=True)], axis=1)
        return Xc, phic

    def geometry(self, phi=None, elems=None):
        """Triangle vertices ``(m, 3, 2)``, segment end points ``(s, 2, 2)``."""
        Xc, phic = self.nodes5(phi)
        tv = _vertex(Xc[self.tri_elem], phic[self.tri_elem], self.tri_desc)
        sv = _vertex(Xc[self.seg_elem], phic[self.seg_elem], self.seg_desc)
        return tv, sv

    def triangle_areas(self, phi=None):
        tv, _ = self.geometry(phi)
        return tri_area(tv)

    def phase_areas(self, phi=None):
        a = self.triangle_areas(phi)
        return float(np.real(a[self.tri_phase == SOLID].sum())), float(np.real(a[self.tri_phase == VOID].sum()))

    def segment_lengths(self, phi=None):
        _, sv = self.geometry(phi)
        d = sv[:, 1] - sv[:, 0]
        return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)

    def segment_normals(self, phi=None):
        """Unit normals pointing from solid into void."""
        _, sv = self.geometry(phi)
        d = sv[:, 1] - sv[:, 0]
        L = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
        L = np.where(np.real(L) == 0, 1.0, L)
        return np.stack([d[:, 1], -d[:, 0]], axis=1) / L[:, None]

    def edge_solid_interval(self, elems, sides, phi=None):
        """Solid part ``[u0, u1]`` of element edges, parametrised from corner ``side`` to ``side + 1``."""
        phi = self.phi if phi is None else phi
        pa = phi[elems, sides]
        pb = phi[elems, (sides + 1) % 4]
        ra, rb = np.real(pa), np.real(pb)
        den = np.where(ra == rb, 1.0, pa - pb)
        t = pa / den
        u0 = np.where(ra < 0, 0.0 * t, t)
        u1 = np.where(rb < 0, 1.0 + 0.0 * t, t)
        none = (ra >= 0) & (rb >= 0)
        u0 = np.where(none, 0.0, u0)
        u1 = np.where(none, 0.0, u1)
        return u0, u1


def tri_area(tv):
    d1 = tv[:, 1] - tv[:, 0]
    d2 = tv[:, 2] - tv[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def decompose_cut_elements(mesh: HierarchicalMesh, nodal_phi, eps_snap: float = 1e-10) -> CutDecomposition:
    """Split every active element into solid and void sub-triangles and interface segments."""
    phi, snapped = snap(np.asarray(nodal_phi, dtype=float), eps_snap)
    if phi.shape != (mesh.n_active, 4):
        raise GeometryError(f"nodal values must have shape ({mesh.n_active}, 4)")
    neg = np.concatenate([phi < 0, (phi.mean(axis=1) < 0)[:, None]], axis=1)
    code = (neg * (1 << np.arange(5))).sum(axis=1)
    n = mesh.n_active
    npieces = np.array([_TABLES[c]["n_pieces"] for c in range(32)])[code]
    offset = np.concatenate([[0], np.cumsum(npieces)])
    piece_elem = np.repeat(np.arange(n), npieces)
    local_piece = np.array([_TABLES[c]["piece"] for c in range(32)])[code]
    elem_piece = np.where(local_piece >= 0, local_piece + offset[:-1, None], -1)

    te, tk, tp, td, se, sk, sd = [], [], [], [], [], [], []
    for c in np.unique(code):
        els = np.flatnonzero(code == c)
        tab = _TABLES[c]
        for k, ph, desc in tab["tris"]:
            te.append(els)
            tk.append(np.full(len(els), k))
            tp.append(np.full(len(els), ph))
            td.append(np.broadcast_to(np.array(desc), (len(els), 3, 2)))
        for k, desc in tab["segs"]:
            se.append(els)
            sk.append(np.full(len(els), k))
            sd.append(np.broadcast_to(np.array(desc), (len(els), 2, 2)))
    tri_elem = np.concatenate(te)
    order = np.lexsort((np.concatenate(tk), tri_elem))
    tri_elem = tri_elem[order]
    tri_sub = np.concatenate(tk)[order]
    tri_phase = np.concatenate(tp)[order]
    tri_desc = np.concatenate(td)[order]
    if se:
        seg_elem = np.concatenate(se)
        so = np.lexsort((np.concatenate(sk), seg_elem))
        seg_elem, seg_sub, seg_desc = seg_elem[so], np.concatenate(sk)[so], np.concatenate(sd)[so]
    else:
        seg_elem = np.zeros(0, dtype=int)
        seg_sub = np.zeros(0, dtype=int)
        seg_desc = np.zeros((0, 2, 2), dtype=int)
    tri_piece = np.where(tri_phase == SOLID, elem_piece[tri_elem, tri_sub], -1)
    seg_piece = elem_piece[seg_elem, seg_sub]
    inter = intersected_mask(phi)
    return CutDecomposition(mesh, phi, snapped, eps_snap, code, inter, tri_elem, tri_sub, tri_phase,
                            tri_desc, tri_piece, seg_elem, seg_desc, seg_piece, piece_elem, elem_piece)


# -------------------------------------------------------------------- pieces

def piece_adjacency(dec: CutDecomposition, rtol: float = 1e-12):
    """Pairs of solid pieces in neighbouring elements whose solid parts share a face segment."""
    mesh = dec.mesh
    faces = mesh.faces()
    if not faces:
        return np.zeros((0, 2), dtype=int)
    f1 = np.array([f.first for f in faces])
    f2 = np.array([f.second for f in faces])
    s1 = np.array([f.side for f in faces])
    s2 = (s1 + 2) % 4
    u0a, u1a = dec.edge_solid_interval(f1, s1)
    u0b, u1b = dec.edge_solid_interval(f2, s2)
    C = mesh.corners
    # coordinate along the face axis
    axis = np.where(s1 % 2 == 0, 0, 1)
    a0 = C[f1, s1, axis]
    a1 = C[f1, (s1 + 1) % 4, axis]
    b0 = C[f2, s2, axis]
    b1 = C[f2, (s2 + 1) % 4, axis]
    ia = np.sort(np.stack([a0 + u0a * (a1 - a0), a0 + u1a * (a1 - a0)], 1), axis=1)
    ib = np.sort(np.stack([b0 + u0b * (b1 - b0), b0 + u1b * (b1 - b0)], 1), axis=1)
    overlap = np.minimum(ia[:, 1], ib[:, 1]) - np.maximum(ia[:, 0], ib[:, 0])
    h = np.abs(a1 - a0)
    ok = (overlap > rtol * h) & (u1a - u0a > 0) & (u1b - u0b > 0)
    pa = dec.elem_piece[f1, s1]
    pb = dec.elem_piece[f2, s2]
    ok &= (pa >= 0) & (pb >= 0)
    return np.stack([pa[ok], pb[ok]], axis=1)


# ----------------------------------------------------------------------- LoN

@dataclasses.dataclass
class LonField:
    values: np.ndarray  # per unique mesh node
    I_max: int

    def element_values(self, mesh: HierarchicalMesh) -> np.ndarray:
        return self.values[mesh.nodes()[1]]


def compute_lon(mesh: HierarchicalMesh, intersected, n_lon: int) -> LonField:
    """Integer ring distance from intersected elements, maximal (= ``n_lon``) on them."""
    if n_lon < 1:
        raise ValueError("N_LoN must be at least 1")
    if isinstance(intersected, CutDecomposition):
        intersected = intersected.intersected
    _, en = mesh.nodes()
    n_nodes = int(en.max()) + 1
    I = np.zeros(n_nodes, dtype=int)
    I[en[np.asarray(intersected, dtype=bool)].ravel()] = 1
    for _ in range(n_lon - 1):
        flagged = (I[en] > 0).any(axis=1)
        hit = np.zeros(n_nodes, dtype=bool)
        hit[en[flagged].ravel()] = True
        I += hit
    return LonField(I, n_lon)


def interface_weight(I_value, I_max: float, gamma_I: float):
    return np.exp(-gamma_I * (np.asarray(I_value, dtype=float) / I_max - 1.0) ** 2)


# --------------------------------------------------------------- hole seeding

@dataclasses.dataclass
class HolePattern:
    """``rows`` x ``cols`` circular holes on a regular grid inside ``box``."""

    rows: int = 10
    cols: int = 30
    radius: float = 0.0437
    box: Optional[tuple] = None  # ((x0, x1), (y0, y1)); defaults to the mesh domain

    def centers(self, domain) -> np.ndarray:
        (x0, x1), (y0, y1) = self.box or domain
        cx = x0 + (np.arange(self.cols) + 0.5) * (x1 - x0) / self.cols
        cy = y0 + (np.arange(self.rows) + 0.5) * (y1 - y0) / self.rows
        return np.stack(np.meshgrid(cx, cy, indexing="ij"), -1).reshape(-1, 2)


def seeded_levelset(pattern: HolePattern, domain, phi_target: float):
    centers = pattern.centers(domain) if pattern.rows * pattern.cols else np.zeros((0, 2))

    def phi(xy):
        xy = np.atleast_2d(xy)
        if len(centers) == 0:
            return np.full(len(xy), -phi_target)
        d = np.linalg.norm(xy[:, None, :] - centers[None], axis=2)
        return np.clip((pattern.radius - d).max(axis=1), -phi_target, phi_target)

    return phi


def seed_initial_holes(basis: ThbBasis, pattern: HolePattern, phi_target: float) -> np.ndarray:
    """Level-set coefficients of a hole pattern, clipped to the regularisation band."""
    mesh = basis.mesh
    if pattern.rows * pattern.cols:
        centers = pattern.centers(mesh.domain)
        cells = mesh.locate(centers)
        coarsest = float(np.max(mesh.sizes[cells]))
        if 2 * pattern.radius < 2 * coarsest:
            raise GeometryError(
                f"hole diameter {2 * pattern.radius:.4g} is below two element widths ({2 * coarsest:.4g});"
                " refine the initial mesh")
    phi = seeded_levelset(pattern, mesh.domain, phi_target)
    # L2 projection with a higher-order rule: the clipped field is only piecewise smooth
    pts, w = quadrature_points(mesh.bboxes, basis.degree + 3)
    P = basis.eval_matrix(pts)
    M = (P.T @ sp.diags(w) @ P).tocsc()
    return spla.spsolve(M, P.T @ (w * phi(pts)))


__all__ = ["SchemeParams", "MaterialFields", "material_fields", "snap", "CutDecomposition",
           "decompose_cut_elements", "piece_adjacency", "LonField", "compute_lon",
           "interface_weight", "HolePattern", "seed_initial_holes", "seeded_levelset"]
