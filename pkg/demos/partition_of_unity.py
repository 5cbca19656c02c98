"""THB splines keep the partition of unity on a locally refined mesh, HB splines do not."""
import numpy as np

from thbtopo.basis import HB, THB, build_basis
from thbtopo.hmesh import create_background_mesh

mesh = create_background_mesh(4, 4, ((0.0, 1.0), (0.0, 1.0)))
for key in [(0, 1, 1), (0, 2, 1), (0, 1, 2), (0, 2, 2)]:
    mesh.refine(key)
mesh.refine((1, 3, 3))
print(f"{mesh.n_active} active elements on levels 0..{mesh.max_level}")

pts = np.random.default_rng(0).random((10_000, 2))
for mode in (THB, HB):
    for p in (1, 2, 3):
        basis = build_basis(mesh, p, mode)
        total = np.asarray(basis.eval_matrix(pts).sum(axis=1)).ravel()
        print(f"{mode:3s} p={p}: {basis.n_functions:3d} functions, max |sum - 1| = {np.abs(total - 1).max():.2e}")
