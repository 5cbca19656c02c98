"""Short run of the half beam on the 60 x 20 mesh with the combined level set/density scheme.

Writes history.csv, VTK snapshots and final_summary.json to ./beam_demo_out.
Pass an iteration count as the first argument (default 60; about 200 to converge).
"""
import sys

from thbtopo.driver import RunConfig, run

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 60
cfg = RunConfig(l0=1, l_ifc_max=1, l_solid_max=1, l_min=1)


def report(it, row, state):
    if it % 10 == 0:
        print(f"it {it:4d}  S {row['S']:8.3f}  mass ratio {row['g_mass'] + cfg.c_m:.4f}  "
              f"rho_shift {row['rho_shift']:.3f}  unknowns {row['n_dofs_xfem']}")


hist, _ = run(cfg, "beam_demo_out", vtk_every=25, max_iters=iters, callback=report)
last = hist.rows[-1]
print(f"{len(hist.rows)} iterations, converged {hist.converged}, S {last['S']:.3f}")
