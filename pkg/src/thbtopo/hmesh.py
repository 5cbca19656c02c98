"""Quadtree hierarchical background mesh and interface-driven adaptation.

Elements are addressed by integer keys ``(level, i, j)``: cell ``(i, j)`` of the
uniform grid obtained by subdividing the background grid ``level`` times.  The
tree is implicit; the parent of ``(l, i, j)`` is ``(l - 1, i // 2, j // 2)``.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

Key = Tuple[int, int, int]

REFINE = "refine"
KEEP = "keep"


class MeshError(ValueError):
    """Invalid mesh configuration or violated mesh invariant."""


@dataclasses.dataclass(frozen=True)
class Element:
    key: Key
    level: int
    parent: Optional[Key]
    children: Optional[Tuple[Key, Key, Key, Key]]
    bbox: Tuple[float, float, float, float]  # x0, y0, x1, y1
    active: bool

    @property
    def id(self) -> Key:
        return self.key


@dataclasses.dataclass(frozen=True)
class Face:
    """Interior edge shared by two active elements.

    ``first`` is the finer (or equal level) element; the face geometry is the
    full edge of ``first`` on side ``side`` (0 bottom, 1 right, 2 top, 3 left).
    """

    first: int
    second: int
    side: int
    p0: Tuple[float, float]
    p1: Tuple[float, float]


def children_of(key: Key) -> Tuple[Key, Key, Key, Key]:
    l, i, j = key
    return ((l + 1, 2 * i, 2 * j), (l + 1, 2 * i + 1, 2 * j),
            (l + 1, 2 * i + 1, 2 * j + 1), (l + 1, 2 * i, 2 * j + 1))


def parent_of(key: Key) -> Optional[Key]:
    l, i, j = key
    if l == 0:
        return None
    return (l - 1, i // 2, j // 2)


class HierarchicalMesh:
    """Quadtree over an ``nx`` x ``ny`` rectangular background grid."""

    def __init__(self, nx: int, ny: int, domain=((0.0, 1.0), (0.0, 1.0))):
        if int(nx) < 1 or int(ny) < 1:
            raise MeshError(f"background grid needs at least one element, got {nx}x{ny}")
        (x0, x1), (y0, y1) = domain
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"domain must have positive extents, got {domain}")
        self.nx, self.ny = int(nx), int(ny)
        self.domain = ((float(x0), float(x1)), (float(y0), float(y1)))
        self.origin = np.array([x0, y0], dtype=float)
        self.h0 = np.array([(x1 - x0) / self.nx, (y1 - y0) / self.ny])
        self.cells = {(0, i, j) for i in range(self.nx) for j in range(self.ny)}
        self.leaves = set(self.cells)
        self._cache: Dict[str, object] = {}

    # ------------------------------------------------------------------ basics
    def copy(self) -> "HierarchicalMesh":
        new = HierarchicalMesh.__new__(HierarchicalMesh)
        new.nx, new.ny, new.domain = self.nx, self.ny, self.domain
        new.origin, new.h0 = self.origin.copy(), self.h0.copy()
        new.cells, new.leaves = set(self.cells), set(self.leaves)
        new._cache = {}
        return new

    def _invalidate(self):
        self._cache.clear()

    def h(self, level: int) -> np.ndarray:
        """Element edge lengths ``(hx, hy)`` at ``level``."""
        return self.h0 / 2.0 ** level

    def grid_shape(self, level: int) -> Tuple[int, int]:
        return self.nx << level, self.ny << level

    @property
    def area(self) -> float:
        (x0, x1), (y0, y1) = self.domain
        return (x1 - x0) * (y1 - y0)

    def bbox(self, key: Key) -> Tuple[float, float, float, float]:
        l, i, j = key
        hx, hy = self.h(l)
        x0 = self.origin[0] + i * hx
        y0 = self.origin[1] + j * hy
        return (x0, y0, x0 + hx, y0 + hy)

    def element(self, key: Key) -> Element:
        if key not in self.cells:
            raise KeyError(key)
        kids = children_of(key)
        refined = kids[0] in self.cells
        return Element(key=key, level=key[0], parent=parent_of(key),
                       children=kids if refined else None, bbox=self.bbox(key),
                       active=key in self.leaves)

    @property
    def max_level(self) -> int:
        return max(k[0] for k in self.leaves)

    # ---------------------------------------------------------------- mutation
    def refine(self, key: Key):
        if key not in self.leaves:
            raise MeshError(f"only active elements can be refined, got {key}")
        self.leaves.remove(key)
        for c in children_of(key):
            self.cells.add(c)
            self.leaves.add(c)
        self._invalidate()

    def coarsen(self, key: Key):
        """Replace the four (active) children of ``key`` by ``key`` itself."""
        kids = children_of(key)
        if not all(c in self.leaves for c in kids):
            raise MeshError(f"children of {key} are not all active")
        for c in kids:
            self.leaves.remove(c)
            self.cells.remove(c)
        self.leaves.add(key)
        self._invalidate()

    def refine_all(self):
        for k in list(self.leaves):
            self.refine(k)

    def refine_uniformly(self, level: int):
        while min(k[0] for k in self.leaves) < level:
            for k in [k for k in self.leaves if k[0] < level]:
                self.refine(k)

    # ----------------------------------------------------- active element data
    @property
    def active(self) -> List[Key]:
        if "active" not in self._cache:
            self._cache["active"] = sorted(self.leaves)
        return self._cache["active"]

    @property
    def n_active(self) -> int:
        return len(self.leaves)

    @property
    def index(self) -> Dict[Key, int]:
        if "index" not in self._cache:
            self._cache["index"] = {k: n for n, k in enumerate(self.active)}
        return self._cache["index"]

    @property
    def levels(self) -> np.ndarray:
        if "levels" not in self._cache:
            self._cache["levels"] = np.array([k[0] for k in self.active], dtype=int)
        return self._cache["levels"]

    @property
    def ij(self) -> np.ndarray:
        if "ij" not in self._cache:
            self._cache["ij"] = np.array([k[1:] for k in self.active], dtype=int).reshape(-1, 2)
        return self._cache["ij"]

    @property
    def sizes(self) -> np.ndarray:
        """(n, 2) element edge lengths."""
        return self.h0[None, :] / (2.0 ** self.levels)[:, None]

    @property
    def bboxes(self) -> np.ndarray:
        """(n, 4) array of ``x0, y0, x1, y1``."""
        if "bboxes" not in self._cache:
            lo = self.origin[None, :] + self.ij * self.sizes
            self._cache["bboxes"] = np.hstack([lo, lo + self.sizes])
        return self._cache["bboxes"]

    @property
    def corners(self) -> np.ndarray:
        """(n, 4, 2) element corners, counter-clockwise from lower-left."""
        b = self.bboxes
        return np.stack([b[:, [0, 1]], b[:, [2, 1]], b[:, [2, 3]], b[:, [0, 3]]], axis=1)

    def leaf_grid(self, level: int) -> np.ndarray:
        """Integer grid over level-``level`` cells.

        Entry is the active index of the leaf occupying the cell, ``-1`` where
        the cell is refined further and ``-2`` where a coarser leaf covers it.
        """
        key = f"grid{level}"
        if key not in self._cache:
            nxl, nyl = self.grid_shape(level)
            g = np.full((nxl, nyl), -2, dtype=np.int64)
            for k in self.cells:
                if k[0] == level:
                    g[k[1], k[2]] = -1
            for k, n in self.index.items():
                if k[0] == level:
                    g[k[1], k[2]] = n
            self._cache[key] = g
        return self._cache[key]

    def present(self, level: int) -> np.ndarray:
        """Boolean grid: level-``level`` cell exists in the tree (is in the subdomain refined to ``level``)."""
        return self.leaf_grid(level) > -2

    def locate(self, points) -> np.ndarray:
        """Active element index containing each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (x0, x1), (y0, y1) = self.domain
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        outside = ((pts[:, 0] < x0 - tol) | (pts[:, 0] > x1 + tol)
                   | (pts[:, 1] < y0 - tol) | (pts[:, 1] > y1 + tol))
        if np.any(outside):
            raise MeshError(f"{int(outside.sum())} point(s) outside the domain, e.g. {pts[outside][0]}")
        out = np.full(len(pts), -1, dtype=np.int64)
        todo = np.arange(len(pts))
        level = 0
        while todo.size:
            if level > self.max_level:
                raise MeshError("point location failed")  # pragma: no cover
            nxl, nyl = self.grid_shape(level)
            hx, hy = self.h(level)
            ci = np.clip(np.floor((pts[todo, 0] - x0) / hx).astype(np.int64), 0, nxl - 1)
            cj = np.clip(np.floor((pts[todo, 1] - y0) / hy).astype(np.int64), 0, nyl - 1)
            hit = self.leaf_grid(level)[ci, cj]
            found = hit >= 0
            out[todo[found]] = hit[found]
            todo = todo[~found]
            level += 1
        return out

    def find_leaf(self, key: Key) -> Optional[Key]:
        """The active element covering cell ``key``; ``None`` if the cell is refined."""
        l, i, j = key
        nxl, nyl = self.grid_shape(l)
        if not (0 <= i < nxl and 0 <= j < nyl):
            return None
        while key not in self.cells:
            key = parent_of(key)
        return key if key in self.leaves else None

    # ----------------------------------------------------------- nodes, faces
    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unique corner points of active elements.

        Returns ``(xy, elem_nodes)`` with ``elem_nodes`` of shape (n, 4) in the
        counter-clockwise corner order of :attr:`corners`.
        """
        if "nodes" not in self._cache:
            L = self.max_level
            scale = 2 ** (L - self.levels)
            i, j = self.ij[:, 0], self.ij[:, 1]
            ci = np.stack([i, i + 1, i + 1, i], axis=1) * scale[:, None]
            cj = np.stack([j, j, j + 1, j + 1], axis=1) * scale[:, None]
            stride = (self.ny << L) + 1
            keys = ci * stride + cj
            uniq, inv = np.unique(keys.ravel(), return_inverse=True)
            hx, hy = self.h(L)
            xy = np.stack([self.origin[0] + (uniq // stride) * hx,
                           self.origin[1] + (uniq % stride) * hy], axis=1)
            self._cache["nodes"] = (xy, inv.reshape(-1, 4))
        return self._cache["nodes"]

    def faces(self) -> List[Face]:
        """All interior faces between active elements (each listed once)."""
        if "faces" in self._cache:
            return self._cache["faces"]
        out = []
        offsets = ((0, -1), (1, 0), (0, 1), (-1, 0))
        idx = self.index
        for k, n in idx.items():
            l, i, j = k
            for side, (di, dj) in enumerate(offsets):
                nb = (l, i + di, j + dj)
                nxl, nyl = self.grid_shape(l)
                if not (0 <= nb[1] < nxl and 0 <= nb[2] < nyl):
                    continue
                if nb in self.leaves:
                    if side in (1, 2):  # same level: record once
                        out.append(self._face(n, idx[nb], k, side))
                elif nb not in self.cells:
                    coarse = self.find_leaf(nb)
                    out.append(self._face(n, idx[coarse], k, side))
        self._cache["faces"] = out
        return out

    def _face(self, n, m, key, side) -> Face:
        x0, y0, x1, y1 = self.bbox(key)
        pts = (((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)),
               ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0)))[side]
        return Face(n, m, side, *pts)

    def boundary_edges(self) -> List[Tuple[int, int]]:
        """``(element index, side)`` for element edges on the domain boundary."""
        out = []
        for k, n in self.index.items():
            l, i, j = k
            nxl, nyl = self.grid_shape(l)
            if j == 0:
                out.append((n, 0))
            if i == nxl - 1:
                out.append((n, 1))
            if j == nyl - 1:
                out.append((n, 2))
            if i == 0:
                out.append((n, 3))
        return out

    # -------------------------------------------------------------- invariants
    def check_tiling(self, rtol: float = 1e-12) -> bool:
        area = float(np.prod(self.sizes, axis=1).sum())
        return abs(area - self.area) <= rtol * self.area

    def balance_violations(self) -> List[Tuple[Key, Key]]:
        """Edge-adjacent active pairs whose levels differ by more than one."""
        bad = []
        for f in self.faces():
            a, b = self.active[f.first], self.active[f.second]
            if abs(a[0] - b[0]) > 1:
                bad.append((a, b))
        return bad

    def is_balanced(self) -> bool:
        return not self.balance_violations()


# ====================================================================== helpers

def create_background_mesh(n_x: int, n_y: int, domain) -> HierarchicalMesh:
    return HierarchicalMesh(n_x, n_y, domain)


def bbox_distance(a, b) -> float:
    """Max-norm gap between two boxes ``(x0, y0, x1, y1)``; 0 when touching."""
    gx = max(0.0, b[0] - a[2], a[0] - b[2])
    gy = max(0.0, b[1] - a[3], a[1] - b[3])
    return max(gx, gy)


def intersected_mask(nodal_phi: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Elements whose corner values change sign or touch zero."""
    phi = np.asarray(nodal_phi)
    return (phi.min(axis=1) < 0) & (phi.max(axis=1) > 0) | np.any(np.abs(phi) < tol, axis=1)


def _check_nodal(mesh: HierarchicalMesh, nodal_phi) -> np.ndarray:
    phi = np.asarray(nodal_phi, dtype=float)
    if phi.shape != (mesh.n_active, 4) or not np.all(np.isfinite(phi)):
        raise MeshError(
            f"nodal level-set values must be finite with shape ({mesh.n_active}, 4), got {phi.shape}")
    return phi


# ================================================================== flagging

def flag_by_levelset(mesh: HierarchicalMesh, nodal_phi, levels, phi_bw: float) -> Dict[Key, str]:
    """Refine/keep flags from corner level-set values (interface, solid, void rules)."""
    l_ifc, l_solid, l_void = levels
    phi = _check_nodal(mesh, nodal_phi)
    band = intersected_mask(phi) | np.any(np.abs(phi) <= phi_bw, axis=1)
    solid = ~band & (phi.max(axis=1) < -phi_bw)
    flags: Dict[Key, str] = {}
    for n, key in enumerate(mesh.active):
        lev = key[0]
        if band[n]:
            flags[key] = REFINE if lev < l_ifc else KEEP
        elif solid[n]:
            flags[key] = REFINE if lev < l_solid else KEEP
        elif lev <= l_void:
            flags[key] = KEEP
    return flags


def apply_buffer(mesh: HierarchicalMesh, flags: Dict[Key, str], b_buffer: float,
                 degree: Optional[int] = None) -> Dict[Key, str]:
    """Flag coarser active neighbours within the buffer distance, recursively.

    For an element of level ``m`` flagged for refinement, every active element
    of level ``< m`` (a neighbour of its parent that is not refined) whose gap
    to the flagged element is below ``b_buffer * h_m`` is flagged as well.
    """
    if degree is not None and b_buffer < degree:
        raise MeshError(f"buffer parameter {b_buffer} smaller than spline degree {degree}")
    out = dict(flags)
    queue = [k for k, f in out.items() if f == REFINE]
    (X0, _), (Y0, _) = mesh.domain
    while queue:
        key = queue.pop()
        m = key[0]
        if m == 0:
            continue
        box = mesh.bbox(key)
        d_buf = b_buffer * float(np.max(mesh.h(m)))
        for lev in range(m - 1, -1, -1):
            hx, hy = mesh.h(lev)
            nxl, nyl = mesh.grid_shape(lev)
            i0 = max(int(np.floor((box[0] - d_buf - X0) / hx)) - 1, 0)
            i1 = min(int(np.ceil((box[2] + d_buf - X0) / hx)) + 1, nxl)
            j0 = max(int(np.floor((box[1] - d_buf - Y0) / hy)) - 1, 0)
            j1 = min(int(np.ceil((box[3] + d_buf - Y0) / hy)) + 1, nyl)
            grid = mesh.leaf_grid(lev)[i0:i1, j0:j1]
            for di, dj in zip(*np.nonzero(grid >= 0)):
                cand = (lev, i0 + int(di), j0 + int(dj))
                if out.get(cand) == REFINE:
                    continue
                if bbox_distance(box, mesh.bbox(cand)) < d_buf:
                    out[cand] = REFINE
                    queue.append(cand)
    return out


# ================================================================ scheduling

@dataclasses.dataclass
class RefinementSchedule:
    """Current and limiting refinement levels of the adaptive strategy."""

    l_ifc: int
    l_solid: int
    l_void: int
    l_ifc_max: int
    l_solid_max: int
    l_min: int = 0
    phi_bw: float = 0.0
    b_buffer: float = 2.0

    @classmethod
    def initial(cls, l0: int, l_ifc_max: int, l_solid_max: int, l_min: int = 0, **kw):
        if not l_min <= l0 <= min(l_ifc_max, l_solid_max):
            raise MeshError(f"initial level {l0} outside [{l_min}, {min(l_ifc_max, l_solid_max)}]")
        return cls(l0, l0, l0, l_ifc_max, l_solid_max, l_min, **kw)

    @property
    def levels(self):
        return (self.l_ifc, self.l_solid, self.l_void)

    def advance(self):
        self.l_ifc = min(self.l_ifc + 1, self.l_ifc_max)
        self.l_solid = min(self.l_solid + 1, self.l_solid_max)
        self.l_void = max(self.l_void - 1, self.l_min)


@dataclasses.dataclass
class RefinementEvent:
    kind: str
    refined: int = 0
    coarsened: int = 0
    levels: Tuple[int, int, int] = (0, 0, 0)

    @property
    def changed(self) -> bool:
        return bool(self.refined or self.coarsened)


PhiFunction = Callable[[np.ndarray], np.ndarray]


def corner_values(mesh: HierarchicalMesh, phi: PhiFunction) -> np.ndarray:
    xy, en = mesh.nodes()
    return np.asarray(phi(xy), dtype=float)[en]


def _refine_flagged(mesh: HierarchicalMesh, flags) -> int:
    keys = [k for k, f in flags.items() if f == REFINE and k in mesh.leaves]
    for k in keys:
        mesh.refine(k)
    return len(keys)


def _enforce_min_level(mesh: HierarchicalMesh, l_min: int) -> int:
    count = 0
    while True:
        low = [k for k in mesh.leaves if k[0] < l_min]
        if not low:
            return count
        for k in low:
            mesh.refine(k)
        count += len(low)


def _refine_intersected(mesh: HierarchicalMesh, phi: PhiFunction, schedule, degree) -> int:
    count = 0
    while True:
        cv = corner_values(mesh, phi)
        hit = intersected_mask(cv) & (mesh.levels < schedule.l_ifc)
        if not hit.any():
            return count
        flags = {mesh.active[n]: REFINE for n in np.flatnonzero(hit)}
        flags = apply_buffer(mesh, flags, schedule.b_buffer, degree)
        count += _refine_flagged(mesh, flags)


def _can_merge(mesh: HierarchicalMesh, parent: Key, b_buffer: float) -> bool:
    """Merging keeps 2:1 balance and the buffer distance to much finer elements."""
    c = parent[0] + 1
    box = mesh.bbox(parent)
    d_buf = b_buffer * float(np.max(mesh.h(c)))
    lv = mesh.levels
    fine = np.flatnonzero(lv >= c + 1)
    if fine.size == 0:
        return True
    b = mesh.bboxes[fine]
    gx = np.maximum(0.0, np.maximum(b[:, 0] - box[2], box[0] - b[:, 2]))
    gy = np.maximum(0.0, np.maximum(b[:, 1] - box[3], box[1] - b[:, 3]))
    return not np.any(np.maximum(gx, gy) < d_buf)


def _coarsen_void(mesh: HierarchicalMesh, void_keys: set, l_void: int, b_buffer: float) -> int:
    count = 0
    changed = True
    while changed:
        changed = False
        parents = sorted({parent_of(k) for k in void_keys if k[0] > 0 and k in mesh.leaves},
                         key=lambda k: -k[0])
        for par in parents:
            kids = children_of(par)
            if par[0] + 1 <= l_void:
                continue
            if not all(k in mesh.leaves and k in void_keys for k in kids):
                continue
            if not _can_merge(mesh, par, b_buffer):
                continue
            mesh.coarsen(par)
            void_keys.difference_update(kids)
            void_keys.add(par)
            count += 1
            changed = True
    return count


def refinement_step(mesh: HierarchicalMesh, phi: PhiFunction, schedule: RefinementSchedule,
                    degree: Optional[int] = None):
    """One scheduled adaptation: flag, buffer, refine, enforce ``l_min``, coarsen void, advance levels.

    ``phi`` evaluates the level-set field at an (n, 2) array of points.
    Returns the new mesh and an event record; ``mesh`` is left untouched.
    """
    new = mesh.copy()
    cv = corner_values(new, phi)
    flags = flag_by_levelset(new, cv, schedule.levels, schedule.phi_bw)
    void_keys = {k for k in new.active if k not in flags}
    flags = apply_buffer(new, flags, schedule.b_buffer, degree)
    void_keys = {k for k in void_keys if k not in flags}
    refined = _refine_flagged(new, flags)
    refined += _enforce_min_level(new, schedule.l_min)
    refined += _refine_intersected(new, phi, schedule, degree)
    coarsened = _coarsen_void(new, void_keys, schedule.l_void, schedule.b_buffer)
    schedule.advance()
    return new, RefinementEvent("scheduled", refined, coarsened, schedule.levels)


def maintain_intersected_uniformity(mesh: HierarchicalMesh, phi: PhiFunction,
                                    schedule: RefinementSchedule, degree: Optional[int] = None):
    """Refine intersected elements below the current interface level (levels unchanged)."""
    new = mesh.copy()
    refined = _refine_intersected(new, phi, schedule, degree)
    return new, RefinementEvent("uniformity", refined, 0, schedule.levels)


def intersected_levels(mesh: HierarchicalMesh, phi: PhiFunction) -> np.ndarray:
    """Distinct levels of the intersected active elements."""
    cv = corner_values(mesh, phi)
    return np.unique(mesh.levels[intersected_mask(cv)])


def buffer_violations(mesh: HierarchicalMesh, b_buffer: float) -> List[Tuple[Key, Key]]:
    """Pairs (fine, coarse) with level gap >= 2 closer than ``b_buffer`` times the intermediate size."""
    lv = mesh.levels
    bb = mesh.bboxes
    bad = []
    for n in np.flatnonzero(lv >= 2):
        m = lv[n] - 1
        d_buf = b_buffer * float(np.max(mesh.h(m)))
        coarse = np.flatnonzero(lv <= m - 1)
        if coarse.size == 0:
            continue
        b = bb[coarse]
        gx = np.maximum(0.0, np.maximum(b[:, 0] - bb[n, 2], bb[n, 0] - b[:, 2]))
        gy = np.maximum(0.0, np.maximum(b[:, 1] - bb[n, 3], bb[n, 1] - b[:, 3]))
        for c in coarse[np.maximum(gx, gy) < d_buf - 1e-12 * d_buf]:
            bad.append((mesh.active[n], mesh.active[c]))
    return bad
