"""Legacy-format VTK output of the mesh and the cut design."""
from __future__ import annotations

import os

import numpy as np

from .geom import SOLID


def _write(path, points, cells, cell_type, cell_data=None, point_data=None, title="thbtopo"):
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points)} double\n")
        for p in points:
            fh.write(f"{p[0]:.10g} {p[1]:.10g} 0\n")
        k = cells.shape[1]
        fh.write(f"CELLS {len(cells)} {len(cells) * (k + 1)}\n")
        for c in cells:
            fh.write(f"{k} " + " ".join(map(str, c)) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("\n".join([str(cell_type)] * len(cells)) + "\n")
        for tag, data, n in (("CELL_DATA", cell_data, len(cells)), ("POINT_DATA", point_data, len(points))):
            if not data:
                continue
            fh.write(f"{tag} {n}\n")
            for name, arr in data.items():
                arr = np.asarray(arr)
                if arr.ndim == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    fh.write("\n".join(f"{v:.10g}" for v in arr) + "\n")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    fh.write("\n".join(f"{v[0]:.10g} {v[1]:.10g} 0" for v in arr) + "\n")


def write_mesh(path, mesh, phi_coef=None, basis=None):
    """Active elements as quads with level and element-mean level set."""
    pts = mesh.corners.reshape(-1, 2)
    cells = np.arange(len(pts)).reshape(-1, 4)
    cd = {"level": mesh.levels.astype(float)}
    if phi_coef is not None and basis is not None:
        cd["phi_mean"] = (basis.corner_matrix() @ phi_coef).reshape(-1, 4).mean(axis=1)
    _write(path, pts, cells, 9, cd)


def write_design(path, model, u):
    """Integration triangles with phase, and displacement at their vertices (solid only)."""
    dec = model.dec
    tv, _ = dec.geometry()
    tv = np.real(tv)
    pts = tv.reshape(-1, 2)
    cells = np.arange(len(pts)).reshape(-1, 3)
    disp = np.zeros_like(pts)
    solid = np.flatnonzero(dec.tri_phase == SOLID)
    if len(solid) and len(u):
        vp = tv[solid].reshape(-1, 2)
        el = np.repeat(dec.tri_elem[solid], 3)
        pc = np.repeat(dec.tri_piece[solid], 3)
        disp[(solid[:, None] * 3 + np.arange(3)).ravel()] = model.displacement(u, vp, el, pc)
    _write(path, pts, cells, 5, {"phase": dec.tri_phase.astype(float)}, {"displacement": disp})


def write_snapshot(out_dir, it, mesh, basis, phi_coef, model, u):
    write_mesh(os.path.join(out_dir, f"mesh_{it:04d}.vtk"), mesh, phi_coef, basis)
    write_design(os.path.join(out_dir, f"design_{it:04d}.vtk"), model, u)
