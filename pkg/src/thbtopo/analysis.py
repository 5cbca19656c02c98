"""Heaviside-enriched linear elasticity on the cut mesh.

The state field is first order: the linear truncated hierarchical basis on
the analysis mesh (bilinear per element, conforming across hanging nodes).
Each state function gets one displacement pair per connected solid component
of its support.  All element-level terms are computed from the four corner
level-set values of the owning element, in a form that also accepts complex
values; the sensitivity code relies on this.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .basis import THB, ThbBasis
from .geom import PLAIN, SOLID, CutDecomposition, SchemeParams, piece_adjacency

log = logging.getLogger(__name__)

TRI_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
TRI_W = np.full(3, 1 / 3)
G2 = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
G2W = np.array([0.5, 0.5])
SIDE_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


class AnalysisError(RuntimeError):
    pass


class SingularSystemError(AnalysisError):
    pass


# ------------------------------------------------------------------ inputs

@dataclasses.dataclass
class ElasticParams:
    nu: float = 0.3
    plane_stress: bool = True
    c_nitsche: float = 100.0
    gamma_ghost: float = 0.005
    springs: bool = True
    spring_loaded: float = 1e-6  # spring factor on islands that carry a traction
    material: SchemeParams = dataclasses.field(default_factory=lambda: SchemeParams(scheme=PLAIN))

    @property
    def E0(self) -> float:
        return self.material.E0

    def D(self) -> np.ndarray:
        """Voigt constitutive matrix for unit Young's modulus."""
        nu = self.nu
        if self.plane_stress:
            return np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]]) / (1 - nu ** 2)
        c = 1.0 / ((1 + nu) * (1 - 2 * nu))
        return c * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]])


@dataclasses.dataclass
class DirichletSegment:
    """Prescribed displacement on the part ``[lo, hi]`` of a domain side (0 bottom, 1 right, 2 top, 3 left)."""

    side: int
    lo: float
    hi: float
    value: object = (0.0, 0.0)  # constant pair or callable xy -> (n, 2)
    components: tuple = (True, True)

    @property
    def full(self) -> bool:
        return all(self.components)


@dataclasses.dataclass
class NeumannSegment:
    side: int
    lo: float
    hi: float
    traction: tuple = (0.0, -1.0)


@dataclasses.dataclass
class BoundaryConditions:
    dirichlet: List[DirichletSegment] = dataclasses.field(default_factory=list)
    neumann: List[NeumannSegment] = dataclasses.field(default_factory=list)
    interface_value: Optional[Callable] = None  # displacement imposed on the solid/void interface


def _eval_value(value, xy):
    if callable(value):
        return np.asarray(value(xy))
    return np.broadcast_to(np.asarray(value, dtype=float), xy.shape).astype(xy.dtype)


def _cmax(a, b):
    return np.where(np.real(a) >= np.real(b), a, b)


def _cmin(a, b):
    return np.where(np.real(a) <= np.real(b), a, b)


# ------------------------------------------------------------ state space

class StateSpace:
    """Linear hierarchical state basis with padded per-element extraction."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.basis = ThbBasis(mesh, 1, THB)
        self.inc = self.basis.padded_incidence()
        n, K = self.inc.shape
        self.K = K
        nf = self.basis.n_functions
        coo = self.basis.extraction.tocoo()
        e, r = np.divmod(coo.row, 4)
        keys = np.where(self.inc >= 0, np.arange(n)[:, None] * nf + self.inc, -1)
        flat = keys.ravel()
        order = np.argsort(flat)
        pos = order[np.searchsorted(flat[order], e * nf + coo.col)]
        C = np.zeros((n, 4, K))
        C[e, r, pos % K] = coo.data
        self.C = C

    def nodes(self) -> np.ndarray:
        """Nodal point (peak) of every linear state function."""
        b = self.basis
        (x0, _), (y0, _) = self.mesh.domain
        h = np.array([self.mesh.h(m) for m in range(b.fn_level.max() + 1)])[b.fn_level]
        return np.array([x0, y0]) + (b.fn_anchor + 1) * h

    def shape(self, elems, pts):
        """Values ``(m, K)`` and gradients ``(m, K, 2)`` of the incident functions."""
        bb = self.mesh.bboxes[elems]
        size = bb[:, 2:] - bb[:, :2]
        t = (pts - bb[:, :2]) / size
        tx, ty = t[:, 0], t[:, 1]
        Nl = np.stack([(1 - tx) * (1 - ty), (1 - tx) * ty, tx * (1 - ty), tx * ty], axis=1)
        gx = np.stack([-(1 - ty), -ty, 1 - ty, ty], axis=1) / size[:, :1]
        gy = np.stack([-(1 - tx), 1 - tx, -tx, tx], axis=1) / size[:, 1:]
        C = self.C[elems]
        N = np.einsum("mr,mrk->mk", Nl, C)
        G = np.stack([np.einsum("mr,mrk->mk", gx, C), np.einsum("mr,mrk->mk", gy, C)], axis=-1)
        return N, G


def _bmat(G):
    m, K, _ = G.shape
    B = np.zeros((m, 3, 2 * K), dtype=G.dtype)
    B[:, 0, 0::2] = G[:, :, 0]
    B[:, 1, 1::2] = G[:, :, 1]
    B[:, 2, 0::2] = G[:, :, 1]
    B[:, 2, 1::2] = G[:, :, 0]
    return B


def _nmat(N):
    m, K = N.shape
    Nm = np.zeros((m, 2, 2 * K), dtype=N.dtype)
    Nm[:, 0, 0::2] = N
    Nm[:, 1, 1::2] = N
    return Nm


def _traction_op(n):
    """(m, 2, 3) map from Voigt stress to traction ``sigma . n``."""
    z = np.zeros_like(n[:, 0])
    return np.stack([np.stack([n[:, 0], z, n[:, 1]], -1), np.stack([z, n[:, 1], n[:, 0]], -1)], axis=1)


def _strain_op(n):
    """(m, 2, 3) map from Voigt strain (engineering shear) to ``eps . n``."""
    z = np.zeros_like(n[:, 0])
    return np.stack([np.stack([n[:, 0], z, 0.5 * n[:, 1]], -1),
                     np.stack([z, n[:, 1], 0.5 * n[:, 0]], -1)], axis=1)


# ------------------------------------------------------------- enrichment

@dataclasses.dataclass
class EnrichmentMap:
    n_sets: int
    piece_sets: np.ndarray     # (n_pieces, K) enrichment set per incident function, -1 padding
    set_function: np.ndarray   # (n_sets,) state function of each set
    levels: np.ndarray         # (n_functions,) number of sets per state function

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_sets

    def piece_dofs(self, pieces) -> np.ndarray:
        s = self.piece_sets[pieces]
        d = np.stack([2 * s, 2 * s + 1], axis=-1).reshape(len(s), -1)
        return np.where(np.repeat(s, 2, axis=1) >= 0, d, -1)


def build_enrichment(space: StateSpace, dec: CutDecomposition, adjacency=None) -> EnrichmentMap:
    """One displacement pair per (state function, connected solid component of its support)."""
    inc = space.inc
    K = space.K
    nf = space.basis.n_functions
    funcs = inc[dec.piece_elem]
    valid = funcs >= 0
    node = np.full(funcs.shape, -1)
    node[valid] = np.arange(valid.sum())
    n_nodes = int(valid.sum())
    pairs = piece_adjacency(dec) if adjacency is None else adjacency
    if len(pairs):
        fa, fb = funcs[pairs[:, 0]], funcs[pairs[:, 1]]
        match = (fa[:, :, None] == fb[:, None, :]) & (fa[:, :, None] >= 0)
        r, ka, kb = np.nonzero(match)
        rows = node[pairs[r, 0], ka]
        cols = node[pairs[r, 1], kb]
    else:
        rows = cols = np.zeros(0, dtype=int)
    G = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_nodes))
    n_sets, labels = connected_components(G, directed=False) if n_nodes else (0, np.zeros(0, int))
    piece_sets = np.full(funcs.shape, -1)
    piece_sets[valid] = labels
    set_function = np.zeros(n_sets, dtype=int)
    set_function[labels] = funcs[valid]
    levels = np.bincount(set_function, minlength=nf)
    return EnrichmentMap(int(n_sets), piece_sets, set_function, levels)


def detect_islands(dec: CutDecomposition, support, adjacency=None, loaded=None,
                   loaded_factor: float = 1.0) -> np.ndarray:
    """Spring factor per solid piece: 0 when supported, 1 on free islands.

    ``support`` is an ``(n_pieces, 2)`` boolean array of displacement components
    constrained on each piece.  A connected solid component is supported when
    both components are constrained somewhere on it.  Islands carrying a
    traction (``loaded`` per piece) get ``loaded_factor`` instead of 1, so a
    load cut off from the supports is not held up by stiff fictitious springs.
    """
    n = dec.n_pieces
    pairs = piece_adjacency(dec) if adjacency is None else adjacency
    G = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    nc, lab = connected_components(G, directed=False) if n else (0, np.zeros(0, int))
    comp = np.zeros((nc, 2), dtype=bool)
    sup = np.asarray(support, dtype=bool).reshape(n, 2)
    np.logical_or.at(comp, lab, sup)
    flag = (~comp.all(axis=1)[lab]).astype(float)
    if loaded is not None:
        cl = np.zeros(nc, dtype=bool)
        np.logical_or.at(cl, lab, np.asarray(loaded, dtype=bool))
        flag[(flag > 0) & cl[lab]] = loaded_factor
    return flag


# ------------------------------------------------------------------ model

@dataclasses.dataclass
class LinearSystem:
    K: sp.csr_matrix
    f: np.ndarray
    n_dofs: int
    constrained: np.ndarray  # weakly imposed conditions: no strongly constrained DOFs
    K_bulk: Optional[sp.csr_matrix] = None  # bulk plus island springs: the stored-energy operator

    def dump(self) -> str:
        c = self.K.tocoo()
        lines = [f"% {self.n_dofs} {self.n_dofs} {c.nnz}"]
        lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(c.row, c.col, c.data)]
        return "\n".join(lines) + "\n"


@dataclasses.dataclass
class Terms:
    """Local contributions; every group carries its owning element."""

    bulk_dofs: np.ndarray
    bulk_K: np.ndarray
    bulk_owner: np.ndarray
    spring_dofs: np.ndarray
    spring_K: np.ndarray
    spring_owner: np.ndarray
    bnd_dofs: np.ndarray
    bnd_K: np.ndarray
    bnd_f: np.ndarray
    bnd_owner: np.ndarray
    ghost_dofs: np.ndarray
    ghost_K: np.ndarray
    ghost_owner: np.ndarray
    tri_mass: np.ndarray
    tri_owner: np.ndarray
    seg_len: np.ndarray
    seg_owner: np.ndarray


class XfemModel:
    """Enriched discretisation for fixed sign pattern and mesh; terms are functions of corner values."""

    def __init__(self, mesh, dec: CutDecomposition, params: ElasticParams, bcs: BoundaryConditions,
                 space: Optional[StateSpace] = None):
        self.mesh = mesh
        self.dec = dec
        self.params = params
        self.bcs = bcs
        self.space = space if space is not None and space.mesh is mesh else StateSpace(mesh)
        self.adjacency = piece_adjacency(dec)
        self.enrichment = build_enrichment(self.space, dec, self.adjacency)
        self.h = np.sqrt(np.prod(mesh.sizes, axis=1))
        self._setup_boundary()
        self._setup_ghost()
        self.spring_flag = (detect_islands(dec, self.support, self.adjacency, self.loaded,
                                           params.spring_loaded)
                            if params.springs else np.zeros(dec.n_pieces))
        if self.enrichment.n_sets and not self.support.any(axis=0).all() and not self.spring_flag.any():
            raise SingularSystemError("no Dirichlet support and no island springs: system is singular")

    # ------------------------------------------------------------ topology
    def _setup_boundary(self):
        mesh, dec = self.mesh, self.dec
        be = np.array(mesh.boundary_edges(), dtype=int).reshape(-1, 2)
        C = mesh.corners
        items = []
        for kind, segs in (("D", self.bcs.dirichlet), ("N", self.bcs.neumann)):
            for n, seg in enumerate(segs):
                sel = be[be[:, 1] == seg.side]
                if not len(sel):
                    continue
                e, s = sel[:, 0], sel[:, 1]
                axis = 0 if seg.side % 2 == 0 else 1
                a0 = C[e, s, axis]
                a1 = C[e, (s + 1) % 4, axis]
                lo, hi = np.minimum(a0, a1), np.maximum(a0, a1)
                hit = (np.minimum(hi, seg.hi) - np.maximum(lo, seg.lo) > 0) & (dec.elem_piece[e, s] >= 0)
                for ee, ss in zip(e[hit], s[hit]):
                    items.append((kind, n, int(ee), int(ss)))
        self.bnd_items = items
        self.bnd_elem = np.array([it[2] for it in items], dtype=int)
        self.bnd_side = np.array([it[3] for it in items], dtype=int)
        self.bnd_piece = (dec.elem_piece[self.bnd_elem, self.bnd_side] if items else np.zeros(0, int))
        support = np.zeros((dec.n_pieces, 2), dtype=bool)
        loaded = np.zeros(dec.n_pieces, dtype=bool)
        for it, p in zip(items, self.bnd_piece):
            if it[0] == "D":
                support[p] |= np.asarray(self.bcs.dirichlet[it[1]].components, dtype=bool)
            else:
                loaded[p] |= bool(np.any(self.bcs.neumann[it[1]].traction))
        self.loaded = loaded
        if self.bcs.interface_value is not None:
            support[dec.seg_piece] = True
        self.support = support

    def _setup_ghost(self):
        dec, mesh = self.dec, self.mesh
        pairs = []
        if self.params.gamma_ghost > 0:
            faces = mesh.faces()
            inter = dec.intersected
            if faces:
                f1 = np.array([f.first for f in faces])
                f2 = np.array([f.second for f in faces])
                side = np.array([f.side for f in faces])
                use = inter[f1] | inter[f2]
                adj = {tuple(p) for p in self.adjacency.tolist()}
                for fi in np.flatnonzero(use):
                    a, b, s = f1[fi], f2[fi], side[fi]
                    pa = dec.elem_piece[a, s]
                    pb = dec.elem_piece[b, (s + 2) % 4]
                    if pa >= 0 and pb >= 0 and (pa, pb) in adj:
                        pairs.append((fi, a, b, s, pa, pb))
        self.ghost = np.array(pairs, dtype=int).reshape(-1, 6)

    # --------------------------------------------------------------- terms
    def _E(self, phi_pts):
        m = self.params.material
        return m.youngs(m.s_from_phi(phi_pts))

    def terms(self, phi=None) -> Terms:
        """All local matrices and functional densities for corner values ``phi`` (may be complex)."""
        dec, sp_, P = self.dec, self.space, self.params
        phi = dec.phi if phi is None else phi
        D = P.D()
        K = sp_.K
        enr = self.enrichment
        Xc, phic = dec.nodes5(phi)

        # bulk: solid sub-triangles
        solid = np.flatnonzero(dec.tri_phase == SOLID)
        te = dec.tri_elem[solid]
        desc = dec.tri_desc[solid]
        tv, _ = dec.geometry(phi)
        tv = tv[solid]
        pv = np.where(desc[..., 0] == desc[..., 1], np.take_along_axis(phic[te], desc[..., 0], axis=1), 0.0)
        d1, d2 = tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]
        area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        nt = len(solid)
        qpts = np.einsum("qj,tjd->tqd", TRI_BARY, tv).reshape(-1, 2)
        qphi = np.einsum("qj,tj->tq", TRI_BARY, pv).reshape(-1)
        qel = np.repeat(te, 3)
        N, G = sp_.shape(qel, qpts)
        Eq = self._E(qphi)
        wq = (area[:, None] * TRI_W[None, :]).reshape(-1)
        B = _bmat(G)
        DB = np.matmul(D, B) * (Eq * wq)[:, None, None]
        # stack the three points of a triangle so one product sums them
        bulk_K = np.matmul(B.reshape(nt, 9, 2 * K).transpose(0, 2, 1), DB.reshape(nt, 9, 2 * K))
        pieces = dec.tri_piece[solid]
        bulk_dofs = enr.piece_dofs(pieces)
        rho = P.material.rho(P.material.s_from_phi(qphi))
        tri_mass = (rho * wq).reshape(nt, 3).sum(axis=1)

        # springs on islands
        isl = self.spring_flag[pieces] > 0
        if isl.any():
            Nm = _nmat(N).reshape(nt, 3, 2, 2 * K)[isl]
            kspring = self.spring_flag[pieces[isl]] * P.E0 / self.h[te[isl]] ** 2
            w = wq.reshape(nt, 3)[isl] * kspring[:, None]
            Nm = Nm.reshape(len(w), 6, 2 * K)
            spring_K = np.matmul(Nm.transpose(0, 2, 1), Nm * np.repeat(w, 2, axis=1)[:, :, None])
            spring_dofs = bulk_dofs[isl]
            spring_owner = te[isl]
        else:
            spring_K = np.zeros((0, 2 * K, 2 * K))
            spring_dofs = np.zeros((0, 2 * K), dtype=int)
            spring_owner = np.zeros(0, dtype=int)

        bnd = self._boundary_terms(phi, D)
        ghost = self._ghost_terms(phi, D)
        seg_len = dec.segment_lengths(phi)
        return Terms(bulk_dofs, bulk_K, te, spring_dofs, spring_K, spring_owner, *bnd, *ghost,
                     tri_mass, te, seg_len, dec.seg_elem)

    def _boundary_terms(self, phi, D):
        dec, P, sp_ = self.dec, self.params, self.space
        K = sp_.K
        C = self.mesh.corners
        out_dofs, out_K, out_f, owner = [], [], [], []
        gam = P.c_nitsche * P.E0
        if len(self.bnd_items):
            e, s = self.bnd_elem, self.bnd_side
            u0, u1 = dec.edge_solid_interval(e, s, phi)
            x0 = C[e, s]
            x1 = C[e, (s + 1) % 4]
            axis = np.where(s % 2 == 0, 0, 1)
            a0 = x0[np.arange(len(e)), axis]
            a1 = x1[np.arange(len(e)), axis]
            lo = np.array([(self.bcs.dirichlet if k == "D" else self.bcs.neumann)[n].lo
                           for k, n, _, _ in self.bnd_items])
            hi = np.array([(self.bcs.dirichlet if k == "D" else self.bcs.neumann)[n].hi
                           for k, n, _, _ in self.bnd_items])
            # clip the solid interval to the segment range, in edge parameter
            ulo = np.clip(np.where(a1 > a0, (lo - a0) / (a1 - a0), (hi - a0) / (a1 - a0)), 0, 1)
            uhi = np.clip(np.where(a1 > a0, (hi - a0) / (a1 - a0), (lo - a0) / (a1 - a0)), 0, 1)
            v0 = _cmax(u0, ulo + 0 * u0)
            v1 = _cmin(u1, uhi + 0 * u1)
            v1 = np.where(np.real(v1) < np.real(v0), v0, v1)
            L = np.linalg.norm(x1 - x0, axis=1) * (v1 - v0)
            uq = v0[:, None] + (v1 - v0)[:, None] * G2[None, :]
            pts = x0[:, None, :] + uq[..., None] * (x1 - x0)[:, None, :]
            pa = phi[e, s]
            pb = phi[e, (s + 1) % 4]
            qphi = pa[:, None] + uq * (pb - pa)[:, None]
            wq = (L[:, None] * G2W[None, :]).reshape(-1)
            qel = np.repeat(e, 2)
            N, G = sp_.shape(qel, pts.reshape(-1, 2))
            Nm = _nmat(N)
            nrm = np.repeat(SIDE_NORMALS[s], 2, axis=0)
            dofs = self.enrichment.piece_dofs(self.bnd_piece)
            kinds = np.array([k for k, _, _, _ in self.bnd_items])
            for kind in ("D", "N"):
                sel = np.flatnonzero(kinds == kind)
                if not len(sel):
                    continue
                qs = (sel[:, None] * 2 + np.arange(2)).ravel()
                if kind == "N":
                    tr = np.array([self.bcs.neumann[self.bnd_items[i][1]].traction for i in sel], dtype=float)
                    tq = np.repeat(tr, 2, axis=0)
                    fq = np.einsum("m,mji,mj->mi", wq[qs], Nm[qs], tq)
                    out_f.append(fq.reshape(len(sel), 2, -1).sum(axis=1))
                    out_K.append(np.zeros((len(sel), 2 * K, 2 * K), dtype=fq.dtype))
                else:
                    mask = np.array([self.bcs.dirichlet[self.bnd_items[i][1]].components for i in sel], float)
                    Pm = np.repeat(mask, 2, axis=0)
                    Eq = self._E(qphi.reshape(-1)[qs])
                    gN = gam / self.h[qel[qs]]
                    uD = np.concatenate([_eval_value(self.bcs.dirichlet[self.bnd_items[i][1]].value,
                                                     pts[i]) for i in sel])
                    Km, fm = self._nitsche(Nm[qs], _bmat(G[qs]), nrm[qs], Pm, Eq, gN, wq[qs], uD, D)
                    out_K.append(Km.reshape(len(sel), 2, 2 * K, 2 * K).sum(axis=1))
                    out_f.append(fm.reshape(len(sel), 2, -1).sum(axis=1))
                out_dofs.append(dofs[sel])
                owner.append(e[sel])
        if self.bcs.interface_value is not None and len(dec.seg_elem):
            se = dec.seg_elem
            _, sv = dec.geometry(phi)
            d = sv[:, 1] - sv[:, 0]
            L = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
            Ls = np.where(np.real(L) == 0, 1.0, L)
            nrm = np.stack([d[:, 1], -d[:, 0]], axis=1) / Ls[:, None]
            pts = sv[:, 0][:, None, :] + G2[None, :, None] * d[:, None, :]
            qel = np.repeat(se, 2)
            N, G = sp_.shape(qel, pts.reshape(-1, 2))
            wq = (L[:, None] * G2W[None, :]).reshape(-1)
            Eq = self._E(np.zeros(len(qel), dtype=np.result_type(phi, float)))
            uD = np.asarray(self.bcs.interface_value(pts.reshape(-1, 2)))
            Pm = np.ones((len(qel), 2))
            Km, fm = self._nitsche(_nmat(N), _bmat(G), np.repeat(nrm, 2, axis=0), Pm, Eq,
                                   gam / self.h[qel], wq, uD, D)
            out_K.append(Km.reshape(len(se), 2, 2 * K, 2 * K).sum(axis=1))
            out_f.append(fm.reshape(len(se), 2, -1).sum(axis=1))
            out_dofs.append(self.enrichment.piece_dofs(dec.seg_piece))
            owner.append(se)
        if not out_K:
            return (np.zeros((0, 2 * K), int), np.zeros((0, 2 * K, 2 * K)), np.zeros((0, 2 * K)),
                    np.zeros(0, int))
        return (np.concatenate(out_dofs), np.concatenate(out_K), np.concatenate(out_f),
                np.concatenate(owner))

    @staticmethod
    def _nitsche(Nm, B, n, Pm, Eq, gN, w, uD, D):
        """Symmetric Nitsche terms at quadrature points; ``Pm`` masks the constrained components."""
        T = Eq[:, None, None] * np.matmul(np.matmul(_traction_op(n), D), B)  # (m, 2, 2K)
        PN = Pm[:, :, None] * Nm
        PT = Pm[:, :, None] * T
        NtPT = np.matmul(Nm.transpose(0, 2, 1), PT)
        Kq = -NtPT - NtPT.transpose(0, 2, 1) + gN[:, None, None] * np.matmul(PN.transpose(0, 2, 1), Nm)
        Kq *= w[:, None, None]
        uDm = Pm * uD
        fq = (-np.einsum("mji,mj->mi", T, uDm) + gN[:, None] * np.einsum("mji,mj->mi", Nm, uDm))
        fq *= w[:, None]
        return Kq, fq

    def _ghost_terms(self, phi, D):
        sp_, P = self.space, self.params
        K = sp_.K
        gh = self.ghost
        if not len(gh):
            return (np.zeros((0, 4 * K), int), np.zeros((0, 4 * K, 4 * K)), np.zeros(0, int))
        _, a, b, s, pa, pb = gh.T
        C = self.mesh.corners
        x0 = C[a, s]
        x1 = C[a, (s + 1) % 4]
        L = np.linalg.norm(x1 - x0, axis=1)
        pts = (x0[:, None, :] + G2[None, :, None] * (x1 - x0)[:, None, :]).reshape(-1, 2)
        qa, qb = np.repeat(a, 2), np.repeat(b, 2)
        _, Ga = sp_.shape(qa, pts)
        _, Gb = sp_.shape(qb, pts)
        n = np.repeat(SIDE_NORMALS[s], 2, axis=0)
        # material of the first element, extended into the void by its interface value
        ph0 = phi[a, s]
        ph1 = phi[a, (s + 1) % 4]
        qphi = (ph0[:, None] + G2[None, :] * (ph1 - ph0)[:, None]).reshape(-1)
        qphi = np.where(np.real(qphi) > 0, 0.0 * qphi, qphi)
        Eq = self._E(qphi)
        Ba, Bb = _bmat(Ga), _bmat(Gb)
        So = _strain_op(n)
        J_eps = np.concatenate([np.matmul(So, Ba), -np.matmul(So, Bb)], axis=2)
        TD = np.matmul(_traction_op(n), D)
        J_sig = Eq[:, None, None] * np.concatenate([np.matmul(TD, Ba), -np.matmul(TD, Bb)], axis=2)
        w = ((self.h[a] * P.gamma_ghost * L)[:, None] * G2W[None, :]).reshape(-1)
        nf = len(a)
        Je = J_eps.reshape(nf, 4, 4 * K)
        Js = (J_sig * w[:, None, None]).reshape(nf, 4, 4 * K)
        KG = np.matmul(Je.transpose(0, 2, 1), Js)
        Kg = 0.5 * (KG + KG.transpose(0, 2, 1))
        dofs = np.concatenate([self.enrichment.piece_dofs(pa), self.enrichment.piece_dofs(pb)], axis=1)
        return dofs, Kg, a

    # ------------------------------------------------------------ assembly
    def _scatter(self, dofs, mats):
        n = self.enrichment.n_dofs
        if not len(dofs):
            return sp.csr_matrix((n, n))
        m = dofs.shape[1]
        rows = np.repeat(dofs, m, axis=1).ravel()
        cols = np.tile(dofs, (1, m)).ravel()
        vals = np.real(mats).reshape(-1)
        ok = (rows >= 0) & (cols >= 0)
        return sp.csr_matrix((vals[ok], (rows[ok], cols[ok])), shape=(n, n))

    def system(self, terms: Optional[Terms] = None) -> LinearSystem:
        t = self.terms() if terms is None else terms
        n = self.enrichment.n_dofs
        Kb = self._scatter(t.bulk_dofs, t.bulk_K) + self._scatter(t.spring_dofs, t.spring_K)
        Kt = Kb + self._scatter(t.bnd_dofs, t.bnd_K) + self._scatter(t.ghost_dofs, t.ghost_K)
        f = np.zeros(n)
        ok = t.bnd_dofs >= 0
        np.add.at(f, t.bnd_dofs[ok], np.real(t.bnd_f)[ok])
        return LinearSystem(Kt.tocsr(), f, n, np.zeros(n, dtype=bool), Kb.tocsr())

    # --------------------------------------------------------- post-process
    def displacement(self, u, pts, elems=None, pieces=None):
        """Displacement at points; ``pieces`` selects the enrichment set (default: piece containing nothing -> first)."""
        if elems is None:
            elems = self.mesh.locate(pts)
        if pieces is None:
            pieces = self.dec.elem_piece[elems].max(axis=1)
        N, _ = self.space.shape(elems, pts)
        dofs = self.enrichment.piece_dofs(pieces)
        ue = np.where(dofs >= 0, u[np.maximum(dofs, 0)], 0.0)
        return np.stack([(N * ue[:, 0::2]).sum(1), (N * ue[:, 1::2]).sum(1)], axis=1)


def assemble(mesh, decomposition, enrichment_or_none, params: ElasticParams, bcs: BoundaryConditions):
    """Build the model and its linear system; returns ``(system, model)``."""
    model = XfemModel(mesh, decomposition, params, bcs)
    return model.system(), model


# ------------------------------------------------------------------ solve

class Solution:
    def __init__(self, system: LinearSystem, lu, u):
        self.system, self.lu, self.u = system, lu, u

    def solve_adjoint(self, rhs) -> np.ndarray:
        return _refined_solve(self.system.K, self.lu, np.asarray(rhs, dtype=float), transpose=True)


def _refined_solve(K, lu, f, transpose=False, rtol=1e-12, max_refine=3):
    trans = "T" if transpose else "N"
    A = K.T if transpose else K
    u = lu.solve(f, trans=trans)
    nf = np.linalg.norm(f)
    if nf == 0:
        return u
    for _ in range(max_refine):
        r = f - A @ u
        if np.linalg.norm(r) <= rtol * nf:
            break
        u += lu.solve(r, trans=trans)
    res = np.linalg.norm(f - A @ u) / nf
    if not np.isfinite(res) or res > 1e-8:
        raise SingularSystemError(f"linear solve failed: relative residual {res:.3e}")
    return u


def solve(system: LinearSystem) -> Solution:
    """Direct sparse solve with iterative refinement to a relative residual of 1e-12."""
    if system.n_dofs == 0:
        return Solution(system, None, np.zeros(0))
    K = system.K.tocsc()
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularSystemError(f"factorisation failed ({exc}); the system is singular") from exc
    d = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(d)) or d.min() == 0:
        raise SingularSystemError("zero or non-finite pivot: system is singular")
    if d.min() <= 1e-14 * d.max():
        log.warning("small pivot ratio %.2e (tiny stabilised subdomain); relying on the residual check",
                    d.min() / d.max())
    u = _refined_solve(K, lu, system.f)
    return Solution(system, lu, u)


__all__ = ["ElasticParams", "DirichletSegment", "NeumannSegment", "BoundaryConditions", "StateSpace",
           "EnrichmentMap", "build_enrichment", "detect_islands", "XfemModel", "LinearSystem", "assemble",
           "solve", "Solution", "AnalysisError", "SingularSystemError"]
