"""Uniform B-splines and (truncated) hierarchical B-spline bases on a quadtree mesh.

Every active function is represented, on each active element of level ``m``,
by its coefficients with respect to the ``(p + 1)**2`` tensor-product
B-splines of level ``m`` that are non-zero there.  These per-element
coefficients form the sparse *extraction* matrix; evaluating any field is then
a local tensor-product evaluation followed by a sparse product.

The background grid is extended by ``p`` layers of ghost cells: at level
``m`` the functions are indexed by the first cell of their support, which runs
from ``-p`` to ``n_m - 1`` in each direction.
"""
from __future__ import annotations

import dataclasses
from math import comb
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hmesh import HierarchicalMesh, MeshError

THB = "THB"
HB = "HB"


class BasisError(RuntimeError):
    """Basis construction or projection failure."""


# ------------------------------------------------------------------ univariate

def subdivision_coeffs(p: int) -> np.ndarray:
    """Weights ``2**-p * C(p+1, j)`` of the two-scale relation, ``j = 0..p+1``."""
    if p < 0:
        raise ValueError("degree must be non-negative")
    return np.array([comb(p + 1, j) for j in range(p + 2)], dtype=float) / 2.0 ** p


def _cox_de_boor(knots, i, p, x):
    if p == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = right = 0.0
    if knots[i + p] != knots[i]:
        left = (x - knots[i]) / (knots[i + p] - knots[i]) * _cox_de_boor(knots, i, p - 1, x)
    if knots[i + p + 1] != knots[i + 1]:
        right = ((knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1])
                 * _cox_de_boor(knots, i + 1, p - 1, x))
    return left + right


def eval_univariate(p: int, anchor: int, level: int, x: float, h0: float = 1.0,
                    origin: float = 0.0) -> float:
    """Uniform B-spline of degree ``p`` with knots ``origin + (anchor + k) * h0 / 2**level``."""
    h = h0 / 2.0 ** level
    knots = origin + (anchor + np.arange(p + 2)) * h
    return _cox_de_boor(knots, 0, p, float(x))


def local_bspline(p: int, t, deriv: bool = False):
    """Values of the ``p + 1`` uniform B-splines non-zero on the unit span.

    Column ``k`` belongs to the function whose support starts ``p - k`` spans
    to the left.  Works for ``t`` in the closed interval [0, 1].  With
    ``deriv=True`` also returns derivatives with respect to ``t``.
    """
    t = np.asarray(t)
    vals = [np.ones_like(t)]
    lower = None
    for j in range(1, p + 1):
        if j == p:
            lower = vals
        saved = np.zeros_like(t)
        new = []
        for r in range(j):
            # uniform knots: right[r+1] + left[j-r] == j
            temp = vals[r] / j
            new.append(saved + (r + 1 - t) * temp)
            saved = (t + j - r - 1) * temp
        new.append(saved)
        vals = new
    N = np.stack(vals, axis=-1)
    if not deriv:
        return N
    if p == 0:
        return N, np.zeros_like(N)
    low = np.stack(lower, axis=-1)
    dN = np.zeros_like(N)
    dN[..., 1:] += low
    dN[..., :-1] -= low
    return N, dN


# --------------------------------------------------------------------- classes

@dataclasses.dataclass(frozen=True)
class HierFunction:
    id: int
    level: int
    anchor: tuple
    degree: int
    truncated: bool
    expansion: tuple  # ((finer full index at level+1, coefficient), ...)


def _window_all(mask: np.ndarray, p: int) -> np.ndarray:
    """For every anchor ``(a, b)`` in ``[-p, n-1]``, whether all support cells are set.

    Cells outside the grid are treated as set (the support is clipped to the domain).
    """
    pad = np.pad(mask.astype(np.int64) == 0, p, constant_values=False).astype(np.int64)
    c = np.zeros((pad.shape[0] + 1, pad.shape[1] + 1), dtype=np.int64)
    c[1:, 1:] = pad.cumsum(0).cumsum(1)
    n0, n1 = mask.shape[0] + p, mask.shape[1] + p
    w = p + 1
    missing = c[w:w + n0, w:w + n1] - c[:n0, w:w + n1] - c[w:w + n0, :n1] + c[:n0, :n1]
    return missing == 0


def _subdivision_1d(n_coarse: int, p: int) -> sp.csr_matrix:
    """Coarse (cells ``n_coarse``) to fine full-index subdivision matrix in 1D."""
    w = subdivision_coeffs(p)
    nfc, nff = n_coarse + p, 2 * n_coarse + p
    rows, cols, vals = [], [], []
    for a in range(-p, n_coarse):
        for j in range(p + 2):
            f = 2 * a + j
            if -p <= f < 2 * n_coarse:
                rows.append(f + p)
                cols.append(a + p)
                vals.append(w[j])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nff, nfc))


class ThbBasis:
    """Hierarchical B-spline basis (``mode="HB"``) or its truncated variant (``"THB"``)."""

    def __init__(self, mesh: HierarchicalMesh, degree: int, mode: str = THB):
        if degree not in (0, 1, 2, 3):
            raise BasisError(f"unsupported degree {degree}")
        if mode not in (THB, HB):
            raise BasisError(f"unknown basis mode {mode!r}")
        bad = mesh.balance_violations()
        if bad:
            raise BasisError(f"mesh is not 2:1 balanced at element {bad[0][0]} (neighbour {bad[0][1]})")
        self.mesh = mesh
        self.degree = p = degree
        self.mode = mode
        L = mesh.max_level
        self.n_levels = L + 1
        self.nf_shape = [(mesh.grid_shape(m)[0] + p, mesh.grid_shape(m)[1] + p) for m in range(L + 1)]

        active, in_next = [], []
        for m in range(L + 1):
            inside = _window_all(mesh.present(m), p)
            if m < L:
                deeper = _window_all(mesh.leaf_grid(m) == -1, p)
            else:
                deeper = np.zeros_like(inside)
            active.append(np.flatnonzero((inside & ~deeper).ravel()))
            in_next.append(inside.ravel())
        self._active_full = active

        # representation of all active functions (levels <= m) at level m
        R = None
        blocks = []
        offset = 0
        self.level_offsets = []
        self._expansions = []
        for m in range(L + 1):
            nf = int(np.prod(self.nf_shape[m]))
            sel = sp.csr_matrix((np.ones(len(active[m])), (active[m], np.arange(len(active[m])))),
                                shape=(nf, len(active[m])))
            if R is None:
                R = sel
            else:
                S = sp.kron(_subdivision_1d(mesh.grid_shape(m - 1)[0], p),
                            _subdivision_1d(mesh.grid_shape(m - 1)[1], p), format="csr")
                prev_act = active[m - 1]
                R = (S @ R).tocsr()
                if mode == THB:
                    R = (sp.diags((~in_next[m]).astype(float)) @ R).tocsr()
                self._expansions.append(R[:, offset - len(prev_act):offset] if prev_act.size else None)
                R = sp.hstack([R, sel], format="csr")
            self.level_offsets.append(offset)
            offset += len(active[m])
            blocks.append(R)
        self._expansions.append(None)
        self.n_functions = offset
        self.fn_level = np.concatenate([np.full(len(a), m) for m, a in enumerate(active)]).astype(int)
        anchors = []
        for m, a in enumerate(active):
            nfy = self.nf_shape[m][1]
            anchors.append(np.stack([a // nfy - p, a % nfy - p], axis=1))
        self.fn_anchor = np.concatenate(anchors).astype(int).reshape(-1, 2)

        # extraction rows for every active element (mesh order is grouped by level)
        K = (p + 1) ** 2
        kx, ky = np.divmod(np.arange(K), p + 1)
        lv, ij = mesh.levels, mesh.ij
        parts = []
        for m in range(L + 1):
            els = np.flatnonzero(lv == m)
            if els.size == 0:
                continue
            nfy = self.nf_shape[m][1]
            rows = ((ij[els, 0][:, None] + kx[None, :]) * nfy + ij[els, 1][:, None] + ky[None, :]).ravel()
            Rm = blocks[m][rows]
            Rm = sp.hstack([Rm, sp.csr_matrix((Rm.shape[0], self.n_functions - Rm.shape[1]))], format="csr")
            parts.append(Rm)
        self.extraction = sp.vstack(parts, format="csr")
        self.extraction.eliminate_zeros()
        self.n_local = K
        inc = (self.extraction != 0).astype(np.int8).tocsr()
        inc.eliminate_zeros()
        elem_of_row = np.repeat(np.arange(mesh.n_active), K)
        self._incidence = sp.csr_matrix(
            (np.ones(inc.nnz), (elem_of_row[np.repeat(np.arange(inc.shape[0]), np.diff(inc.indptr))],
                                inc.indices)), shape=(mesh.n_active, self.n_functions))
        self._incidence.data[:] = 1.0
        self._incidence.sum_duplicates()
        self._incidence.data[:] = 1.0

    # -------------------------------------------------------------- structure
    def __len__(self):
        return self.n_functions

    @property
    def incidence_matrix(self) -> sp.csr_matrix:
        """(n_elements, n_functions) 0/1 matrix of functions non-zero on each element."""
        return self._incidence

    @property
    def incidence(self) -> List[np.ndarray]:
        I = self._incidence
        return [I.indices[I.indptr[e]:I.indptr[e + 1]] for e in range(I.shape[0])]

    def padded_incidence(self):
        I = self._incidence
        counts = np.diff(I.indptr)
        width = int(counts.max()) if counts.size else 0
        out = np.full((I.shape[0], width), -1, dtype=np.int64)
        for e in range(I.shape[0]):
            out[e, :counts[e]] = I.indices[I.indptr[e]:I.indptr[e + 1]]
        return out

    def local_extraction(self, e: int) -> np.ndarray:
        """Dense ``(n_local, n_incident)`` coefficients of the incident functions on element ``e``."""
        K = self.n_local
        rows = self.extraction[e * K:(e + 1) * K]
        cols = self.incidence[e]
        return rows[:, cols].toarray()

    def function(self, n: int) -> HierFunction:
        m = int(self.fn_level[n])
        exp = ()
        truncated = False
        if self._expansions[m] is not None:
            col = self._expansions[m][:, n - self.level_offsets[m]].tocoo()
            exp = tuple(zip(col.row.tolist(), col.data.tolist()))
            full = len(self._untruncated_children(n))
            truncated = self.mode == THB and len(exp) < full
        return HierFunction(n, m, tuple(self.fn_anchor[n]), self.degree, truncated, exp)

    def support_boxes(self) -> np.ndarray:
        """Bounding boxes ``(x0, y0, x1, y1)`` of the untruncated supports, clipped to the domain."""
        (x0, x1), (y0, y1) = self.mesh.domain
        h = np.array([self.mesh.h(m) for m in range(self.fn_level.max() + 1)])[self.fn_level]
        lo = np.array([x0, y0]) + self.fn_anchor * h
        hi = lo + (self.degree + 1) * h
        return np.concatenate([np.maximum(lo, [x0, y0]), np.minimum(hi, [x1, y1])], axis=1)

    def _untruncated_children(self, n):
        p = self.degree
        m = int(self.fn_level[n])
        a, b = self.fn_anchor[n]
        nxm, nym = self.mesh.grid_shape(m + 1)
        out = []
        for jx in range(p + 2):
            for jy in range(p + 2):
                fx, fy = 2 * a + jx, 2 * b + jy
                if -p <= fx < nxm and -p <= fy < nym:
                    out.append((fx, fy))
        return out

    @property
    def functions(self) -> List[HierFunction]:
        return [self.function(n) for n in range(self.n_functions)]

    def stencil_sizes(self) -> np.ndarray:
        """Number of functions whose support shares an element with each function."""
        I = self._incidence
        G = (I.T @ I).tocsr()
        return np.diff(G.indptr)

    def dump_incidence(self) -> str:
        lines = [f"# basis mode={self.mode} degree={self.degree} functions={self.n_functions} "
                 f"elements={self.mesh.n_active}"]
        for e, (key, fns) in enumerate(zip(self.mesh.active, self.incidence)):
            lines.append(f"element {e} level={key[0]} ij=({key[1]},{key[2]}) functions="
                         + " ".join(str(int(f)) for f in fns))
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------- evaluation
    def _local_values(self, points, elems, deriv=False):
        p = self.degree
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        bb = self.mesh.bboxes[elems]
        size = bb[:, 2:] - bb[:, :2]
        t = (pts - bb[:, :2]) / size
        t = np.clip(t, 0.0, 1.0)
        if not deriv:
            Nx = local_bspline(p, t[:, 0])
            Ny = local_bspline(p, t[:, 1])
            return (Nx[:, :, None] * Ny[:, None, :]).reshape(len(pts), -1)
        Nx, dNx = local_bspline(p, t[:, 0], deriv=True)
        Ny, dNy = local_bspline(p, t[:, 1], deriv=True)
        v = (Nx[:, :, None] * Ny[:, None, :]).reshape(len(pts), -1)
        gx = (dNx[:, :, None] * Ny[:, None, :]).reshape(len(pts), -1) / size[:, :1]
        gy = (Nx[:, :, None] * dNy[:, None, :]).reshape(len(pts), -1) / size[:, 1:]
        return v, gx, gy

    def _spread(self, local, elems):
        n, K = local.shape
        cols = (elems[:, None] * K + np.arange(K)[None, :]).ravel()
        rows = np.repeat(np.arange(n), K)
        Lm = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, self.mesh.n_active * K))
        return (Lm @ self.extraction).tocsr()

    def eval_matrix(self, points, elems=None, deriv: bool = False):
        """Sparse matrix mapping coefficients to field values at ``points``.

        With ``deriv=True`` returns ``(values, d/dx, d/dy)`` matrices.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if elems is None:
            elems = self.mesh.locate(pts)
        elems = np.asarray(elems)
        if not deriv:
            return self._spread(self._local_values(pts, elems), elems)
        v, gx, gy = self._local_values(pts, elems, deriv=True)
        return self._spread(v, elems), self._spread(gx, elems), self._spread(gy, elems)

    def evaluate(self, coeffs, points, elems=None) -> np.ndarray:
        return self.eval_matrix(points, elems) @ np.asarray(coeffs)

    def gradient(self, coeffs, points, elems=None) -> np.ndarray:
        _, Dx, Dy = self.eval_matrix(points, elems, deriv=True)
        c = np.asarray(coeffs)
        return np.stack([Dx @ c, Dy @ c], axis=-1)

    def corner_matrix(self) -> sp.csr_matrix:
        """Rows ``4 * e + c``: evaluation at corner ``c`` of active element ``e``."""
        corners = self.mesh.corners.reshape(-1, 2)
        elems = np.repeat(np.arange(self.mesh.n_active), 4)
        return self.eval_matrix(corners, elems)


def build_basis(mesh: HierarchicalMesh, p: int, mode: str = THB) -> ThbBasis:
    return ThbBasis(mesh, p, mode)


def eval_field(basis: ThbBasis, coeffs, x) -> np.ndarray:
    """Field value(s) at point(s) ``x``; raises :class:`MeshError` outside the domain."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.n_functions,):
        raise BasisError(f"expected {basis.n_functions} coefficients, got {coeffs.shape}")
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    out = basis.evaluate(coeffs, pts)
    return out[0] if np.ndim(x) == 1 else out


def nodal_values(basis: ThbBasis, coeffs, mesh: Optional[HierarchicalMesh] = None) -> np.ndarray:
    """Field at the four corners of every active element, shape (n, 4)."""
    mesh = basis.mesh if mesh is None else mesh
    xy, en = mesh.nodes()
    return basis.evaluate(coeffs, xy)[en]


# --------------------------------------------------------------- projection

def gauss_legendre_01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def common_cells(old: HierarchicalMesh, new: HierarchicalMesh):
    """Boxes of the coarsest partition refining both meshes."""
    out = []
    stack = list(new.active)
    while stack:
        k = stack.pop()
        if k in old.leaves or k not in old.cells:
            out.append(new.bbox(k))
        else:
            l, i, j = k
            stack.extend([(l + 1, 2 * i, 2 * j), (l + 1, 2 * i + 1, 2 * j),
                          (l + 1, 2 * i, 2 * j + 1), (l + 1, 2 * i + 1, 2 * j + 1)])
    return np.array(out)


def quadrature_points(boxes: np.ndarray, n: int):
    g, w = gauss_legendre_01(n)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    wx = np.outer(w, w).ravel()
    size = boxes[:, 2:] - boxes[:, :2]
    pts = boxes[:, None, :2] + np.stack([gx.ravel(), gy.ravel()], axis=1)[None] * size[:, None, :]
    wts = wx[None, :] * np.prod(size, axis=1)[:, None]
    return pts.reshape(-1, 2), wts.ravel()


def l2_project(old_basis: ThbBasis, old_coeffs, new_basis: ThbBasis) -> np.ndarray:
    """Coefficients on ``new_basis`` minimising the L2 distance to the old field."""
    cells = common_cells(old_basis.mesh, new_basis.mesh)
    nq = max(old_basis.degree, new_basis.degree) + 1
    pts, w = quadrature_points(cells, nq)
    # evaluate inside cells to avoid ambiguous location on cell edges
    f_old = old_basis.evaluate(old_coeffs, pts)
    P = new_basis.eval_matrix(pts)
    M = (P.T @ sp.diags(w) @ P).tocsc()
    b = P.T @ (w * f_old)
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise BasisError(f"singular Gram matrix in L2 projection: {exc}") from exc
    c = lu.solve(b)
    if not np.all(np.isfinite(c)):
        raise BasisError("non-finite L2 projection result")
    return c
