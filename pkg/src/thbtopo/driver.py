"""Optimisation loop, configuration, output and the command-line entry point.

Configuration files are INI files.  Section names are free (they only group
keys for the reader); every key must be a :class:`RunConfig` field name.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import vtk
from .analysis import (BoundaryConditions, DirichletSegment, ElasticParams, NeumannSegment, XfemModel, solve)
from .basis import HB, THB, ThbBasis, l2_project
from .functionals import (FunctionalParams, Gradients, ObjectiveBreakdown, PenaltyQuadrature, evaluate,
                          total_gradient)
from .geom import (COMBINED, PLAIN, HolePattern, SchemeParams, compute_lon, decompose_cut_elements,
                   seed_initial_holes)
from .hmesh import (RefinementSchedule, create_background_mesh, maintain_intersected_uniformity,
                    refinement_step)
from .mma import MmaState, check_convergence, gcmma_step

log = logging.getLogger("thbtopo")


class RunError(RuntimeError):
    def __init__(self, iteration, phase, exc):
        super().__init__(f"iteration {iteration}, phase '{phase}': {exc}")
        self.iteration, self.phase = iteration, phase


@dataclasses.dataclass
class RunConfig:
    # problem: half of a simply supported beam, symmetry on the right edge
    length: float = 6.0
    height: float = 1.0
    support_length: float = 0.025
    load_width: float = 0.05
    pressure: float = 1.0
    load_mode: str = "resultant"  # resultant: pressure is the force on the half model; traction: pressure is the traction
    support: str = "roller"  # roller | pinned
    # material
    E: float = 1.0
    nu: float = 0.3
    plane_stress: bool = True
    # design
    scheme: str = COMBINED
    degree: int = 2
    mode: str = THB
    s_init: float = 1.0  # full solid start; its strain energy is the normaliser S0
    phi_scale_factor: float = 5.0
    phi_thres: float = 0.5
    beta: float = 2.0
    rho_shift0: float = 0.2
    rho_every: int = 25
    rho_factor: float = 0.5
    hole_rows: int = 10
    hole_cols: int = 30
    hole_radius: float = 0.0437
    # mesh and refinement
    nx: int = 30
    ny: int = 10
    l0: int = 2
    l_ifc_max: int = 2
    l_solid_max: int = 2
    l_min: int = 0
    refine_every: int = 25
    phi_bw: float = 0.0
    b_buffer: float = 0.0  # 0: use the spline degree
    # weights and normalisation
    w_s: float = 0.9
    w_s_final: float = -1.0  # < 0: no continuation
    w_s_iters: int = 150
    w_m: float = 0.0
    c_p: float = 0.025
    c_phi: float = 0.5
    c_m: float = 0.4
    S0: float = 59.12  # <= 0: initial value
    M0: float = 1.0
    P0: float = 6.0
    # regularisation
    phi_target_factor: float = 1.5
    grad_target: float = 0.75
    I_max: int = 1
    gamma_I: float = 4.61
    alpha: float = 0.5
    # stabilisation
    c_nitsche: float = 100.0
    gamma_ghost: float = 0.005
    springs: bool = True
    fix_patches: bool = True  # hold design functions touching the load and support patches at solid
    eps_snap: float = 1e-8  # relative to phi_scale
    # optimiser
    max_iters: int = 1000
    tol: float = 1e-5
    asyinit: float = 0.05
    asydecr: float = 0.65
    asyincr: float = 1.05
    max_inner: int = 20
    reset_on_continuation: bool = False  # restart the asymptotes when rho_shift changes
    seed: int = 0

    # ------------------------------------------------------------ helpers
    @property
    def domain(self):
        return ((0.0, self.length / 2), (0.0, self.height))

    @property
    def h_init(self) -> float:
        return (self.length / 2) / self.nx / 2 ** self.l0

    @property
    def l_max(self) -> int:
        return max(self.l_ifc_max, self.l_solid_max)

    @property
    def adaptive(self) -> bool:
        return self.refine_every > 0 and (self.l_max > self.l0 or self.l_min < self.l0)

    def validate(self):
        if self.scheme not in (PLAIN, COMBINED):
            raise ValueError(f"scheme must be '{PLAIN}' or '{COMBINED}'")
        if self.mode not in (THB, HB):
            raise ValueError(f"mode must be '{THB}' or '{HB}'")
        if self.degree not in (1, 2, 3):
            raise ValueError("degree must be 1, 2 or 3")
        if self.load_mode not in ("resultant", "traction"):
            raise ValueError("load_mode must be 'resultant' or 'traction'")
        if self.support not in ("pinned", "roller"):
            raise ValueError("support must be 'pinned' or 'roller'")
        if not 0.001 <= self.gamma_ghost <= 0.1 and self.gamma_ghost != 0:
            raise ValueError("gamma_ghost must lie in [0.001, 0.1] (or 0 to disable)")
        return self

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(path)
        kw = {}
        for sec in cp.sections():
            for k, v in cp.items(sec):
                kw[k] = v
        return cls.from_dict(kw)

    @classmethod
    def from_dict(cls, kw) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        out = {}
        for k, v in kw.items():
            if k not in fields:
                raise ValueError(f"unknown configuration key '{k}'")
            typ = type(fields[k].default)
            if isinstance(v, str):
                if typ is bool:
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                else:
                    v = typ(v)
            out[k] = v
        return cls(**out).validate()

    def to_ini(self) -> str:
        lines = ["[run]"] + [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ problem

def beam_conditions(cfg: RunConfig) -> BoundaryConditions:
    half = cfg.length / 2
    comps = (True, True) if cfg.support == "pinned" else (False, True)
    traction = cfg.pressure / (cfg.load_width / 2) if cfg.load_mode == "resultant" else cfg.pressure
    return BoundaryConditions(
        dirichlet=[DirichletSegment(0, 0.0, cfg.support_length, (0.0, 0.0), comps),
                   DirichletSegment(1, 0.0, cfg.height, (0.0, 0.0), (True, False))],
        neumann=[NeumannSegment(2, half - cfg.load_width / 2, half, (0.0, -traction))])


def scheme_params(cfg: RunConfig, rho_shift: Optional[float] = None) -> SchemeParams:
    return SchemeParams(scheme=cfg.scheme, phi_scale=cfg.phi_scale_factor * cfg.h_init, phi_thres=cfg.phi_thres,
                        rho_shift=cfg.rho_shift0 if rho_shift is None else rho_shift, rho0=1.0, E0=cfg.E,
                        beta=cfg.beta)


def functional_params(cfg: RunConfig, w_s: Optional[float] = None, S0: Optional[float] = None) -> FunctionalParams:
    return FunctionalParams(w_s=cfg.w_s if w_s is None else w_s, w_m=cfg.w_m, c_p=cfg.c_p, c_phi=cfg.c_phi,
                            c_m=cfg.c_m, S0=cfg.S0 if S0 is None else S0, M0=cfg.M0, P0=cfg.P0,
                            phi_target=cfg.phi_target_factor * cfg.h_init, grad_target=cfg.grad_target,
                            I_max=cfg.I_max, gamma_I=cfg.gamma_I, alpha=(cfg.alpha,) * 3)


def elastic_params(cfg: RunConfig, scheme: SchemeParams) -> ElasticParams:
    return ElasticParams(nu=cfg.nu, plane_stress=cfg.plane_stress, c_nitsche=cfg.c_nitsche,
                         gamma_ghost=cfg.gamma_ghost, springs=cfg.springs, material=scheme)


def design_bounds(cfg: RunConfig):
    if cfg.scheme == COMBINED:
        return 0.0, 1.0
    b = cfg.phi_target_factor * cfg.h_init
    return -b, b


def solid_value(cfg: RunConfig) -> float:
    return 1.0 if cfg.scheme == COMBINED else -cfg.phi_target_factor * cfg.h_init


def patch_functions(cfg: RunConfig, basis: ThbBasis) -> np.ndarray:
    """Design functions whose support touches the support or load patch."""
    box = basis.support_boxes()
    half = cfg.length / 2
    out = np.zeros(len(box), dtype=bool)
    if not cfg.fix_patches:
        return out
    for (a, b), y in (((0.0, cfg.support_length), 0.0), ((half - cfg.load_width / 2, half), cfg.height)):
        out |= ((np.minimum(box[:, 2], b) - np.maximum(box[:, 0], a) > 0) & (box[:, 1] <= y) & (box[:, 3] >= y))
    return out


def design_box(cfg: RunConfig, basis: ThbBasis):
    """Per-variable bounds with patch functions pinned to the solid value."""
    lo, hi = design_bounds(cfg)
    fixed = patch_functions(cfg, basis)
    xmin = np.where(fixed, solid_value(cfg), lo)
    xmax = np.where(fixed, solid_value(cfg), hi)
    return xmin, xmax


def phi_coefficients(s, scheme: SchemeParams):
    return scheme.phi_from_s(s) if scheme.scheme == COMBINED else np.asarray(s, dtype=float)


@dataclasses.dataclass
class DesignAnalysis:
    breakdown: ObjectiveBreakdown
    gradients: Optional[Gradients]
    model: XfemModel
    solution: object
    n_dofs: int


class Evaluator:
    """Forward analysis and design derivatives on a fixed mesh and basis."""

    def __init__(self, mesh, basis: ThbBasis, cfg: RunConfig, scheme: SchemeParams, fp: FunctionalParams,
                 bcs: Optional[BoundaryConditions] = None):
        self.mesh, self.basis, self.cfg = mesh, basis, cfg
        self.scheme, self.fp = scheme, fp
        self.bcs = bcs if bcs is not None else beam_conditions(cfg)
        self.A = basis.corner_matrix()
        (x0, x1), (y0, y1) = mesh.domain
        self.total_mass = scheme.rho0 * (x1 - x0) * (y1 - y0)
        self._space = None

    def nodal(self, s):
        return (self.A @ phi_coefficients(s, self.scheme)).reshape(-1, 4)

    def __call__(self, s, gradients: bool = True) -> DesignAnalysis:
        phi_coef = phi_coefficients(s, self.scheme)
        dec = decompose_cut_elements(self.mesh, self.nodal(s), self.cfg.eps_snap * self.scheme.phi_scale)
        lon = compute_lon(self.mesh, dec, self.fp.I_max)
        quad = PenaltyQuadrature(self.basis, lon, self.fp)
        model = XfemModel(self.mesh, dec, elastic_params(self.cfg, self.scheme), self.bcs, self._space)
        self._space = model.space
        sol = solve(model.system())
        bd = evaluate(model, sol, quad, phi_coef, self.fp, self.total_mass)
        grads = None
        if gradients:
            grads = total_gradient(model, sol, self.basis, quad, phi_coef, self.scheme, self.fp, self.total_mass,
                                   self.A)
        return DesignAnalysis(bd, grads, model, sol, model.enrichment.n_dofs)


# ------------------------------------------------------------------ history

@dataclasses.dataclass
class OptHistory:
    rows: List[dict] = dataclasses.field(default_factory=list)
    events: List[dict] = dataclasses.field(default_factory=list)
    converged: bool = False

    COLUMNS = ("iteration", "S", "M_A", "P_p", "P_phi", "P_grad", "total", "g_mass", "n_dofs_xfem",
               "n_dofs_fem", "n_elements", "n_design", "rho_shift", "w_s", "time")

    @property
    def xfem_dofs(self):
        return np.array([r["n_dofs_xfem"] for r in self.rows], dtype=float)

    @property
    def fem_dofs(self):
        return np.array([r["n_dofs_fem"] for r in self.rows], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k) for k in self.COLUMNS})

    @classmethod
    def read_csv(cls, path) -> "OptHistory":
        with open(path) as fh:
            rows = [{k: float(v) for k, v in r.items() if v != ""} for r in csv.DictReader(fh)]
        return cls(rows)


def efficiency_metrics(adaptive: OptHistory, uniform: OptHistory, n_s: float = 1.0):
    """``(E_xfem, R_xfem, E_fem, R_fem)`` over the first ``N_opt`` iterations of both runs."""
    n = min(len(adaptive.rows), len(uniform.rows))
    if n == 0:
        raise ValueError("efficiency metrics need non-empty histories")
    a = adaptive.xfem_dofs[:n] ** n_s
    ux = uniform.xfem_dofs[:n] ** n_s
    uf = uniform.fem_dofs[:n] ** n_s
    return (float(ux.sum() / a.sum()), float(ux.max() / a.max()),
            float(uf.sum() / a.sum()), float(uf.max() / a.max()))


def fem_dofs(cfg: RunConfig) -> int:
    """Bilinear FEM unknowns on the uniform mesh at the highest level, all nodes active."""
    f = 2 ** cfg.l_max
    return 2 * (cfg.nx * f + 1) * (cfg.ny * f + 1)


# ------------------------------------------------------------------ run

def rho_shift_at(cfg: RunConfig, iteration: int) -> float:
    """Start value, gap to one shrunk by ``rho_factor`` every ``rho_every`` iterations; snaps to 1 when small."""
    if cfg.scheme != COMBINED or cfg.rho_every <= 0:
        return cfg.rho_shift0 if cfg.scheme == COMBINED else 1.0
    shrink = cfg.rho_factor ** (iteration // cfg.rho_every)
    gap = (1.0 - cfg.rho_shift0) * shrink
    return 1.0 if gap < 0.01 else cfg.rho_shift0 + (1.0 - cfg.rho_shift0) * (1.0 - shrink)


def w_s_at(cfg: RunConfig, iteration: int) -> float:
    if cfg.w_s_final < 0 or cfg.w_s_iters <= 0:
        return cfg.w_s
    t = min(iteration, cfg.w_s_iters) / cfg.w_s_iters
    return cfg.w_s * (cfg.w_s_final / cfg.w_s) ** t


def initial_design(cfg: RunConfig, basis: ThbBasis, scheme: SchemeParams):
    if cfg.scheme == COMBINED:
        return np.full(basis.n_functions, cfg.s_init)
    pattern = HolePattern(cfg.hole_rows, cfg.hole_cols, cfg.hole_radius)
    lo, hi = design_bounds(cfg)
    return np.clip(seed_initial_holes(basis, pattern, cfg.phi_target_factor * cfg.h_init), lo, hi)


def run(cfg: RunConfig, out_dir: Optional[str] = None, vtk_every: int = 0, max_iters: Optional[int] = None,
        deterministic: bool = False, baseline: Optional[OptHistory] = None, callback=None):
    """Optimise the beam; returns ``(history, state)`` where state holds the final mesh, basis and design."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)  # noqa: F841  (kept for reproducible extensions)
    n_iter = cfg.max_iters if max_iters is None else max_iters
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
    degree = cfg.degree
    b_buffer = cfg.b_buffer if cfg.b_buffer > 0 else float(max(degree, 1))
    mesh = create_background_mesh(cfg.nx, cfg.ny, cfg.domain)
    mesh.refine_uniformly(cfg.l0)
    sched = RefinementSchedule.initial(cfg.l0, cfg.l_ifc_max, cfg.l_solid_max, cfg.l_min, phi_bw=cfg.phi_bw,
                                       b_buffer=b_buffer)
    scheme = scheme_params(cfg, rho_shift_at(cfg, 0))
    basis = ThbBasis(mesh, degree, cfg.mode)
    lo, hi = design_box(cfg, basis)
    s = np.clip(initial_design(cfg, basis, scheme), lo, hi)
    mma = MmaState.create(len(s), lo, hi, asyinit=cfg.asyinit, asydecr=cfg.asydecr, asyincr=cfg.asyincr,
                          max_inner=cfg.max_inner)
    hist = OptHistory()
    S0 = cfg.S0 if cfg.S0 > 0 else None
    n_fem = fem_dofs(cfg)
    t0 = time.time()
    objective_trace: List[float] = []
    state = {}

    def phi_fn(b, coeffs):
        return lambda xy: b.evaluate(phi_coefficients(coeffs, scheme), xy)

    def remap(new_mesh, kind, it):
        nonlocal mesh, basis, s, lo, hi
        new_basis = ThbBasis(new_mesh, degree, cfg.mode)
        lo, hi = design_box(cfg, new_basis)
        s_new = np.clip(l2_project(basis, s, new_basis), lo, hi)
        hist.events.append({"iteration": it, "kind": kind, "n_elements": new_mesh.n_active,
                            "levels": list(sched.levels)})
        mesh, basis, s = new_mesh, new_basis, s_new
        mma.reset(len(s), lo, hi)
        objective_trace.clear()

    for it in range(n_iter):
        phase = "setup"
        try:
            rs = rho_shift_at(cfg, it)
            if rs != scheme.rho_shift:
                # a continuation step changes the problem: restart the asymptotes like after a remap
                scheme = scheme_params(cfg, rs)
                if cfg.reset_on_continuation:
                    mma.reset()
                objective_trace.clear()
            w_s = w_s_at(cfg, it)
            # scheduled adaptation
            if cfg.adaptive and it > 0 and it % cfg.refine_every == 0:
                phase = "refinement"
                new_mesh, ev = refinement_step(mesh, phi_fn(basis, s), sched, degree)
                if ev.changed:
                    remap(new_mesh, "scheduled", it)
            # keep intersected elements on one level
            if cfg.adaptive:
                phase = "uniformity"
                for _ in range(cfg.l_max + 1):
                    new_mesh, ev = maintain_intersected_uniformity(mesh, phi_fn(basis, s), sched, degree)
                    if not ev.changed:
                        break
                    remap(new_mesh, "uniformity", it)
            phase = "analysis"
            fp = functional_params(cfg, w_s, S0 if S0 is not None else 1.0)
            ev_fn = Evaluator(mesh, basis, cfg, scheme, fp)
            res = ev_fn(s)
            if S0 is None:
                S0 = res.breakdown.S
                fp = functional_params(cfg, w_s, S0)
                ev_fn = Evaluator(mesh, basis, cfg, scheme, fp)
                res = ev_fn(s)
            bd = res.breakdown
            row = {"iteration": it, **bd.row(), "n_dofs_xfem": res.n_dofs, "n_dofs_fem": n_fem,
                   "n_elements": mesh.n_active, "n_design": len(s), "rho_shift": scheme.rho_shift, "w_s": w_s,
                   "time": time.time() - t0}
            hist.rows.append(row)
            objective_trace.append(bd.total)
            log.info("it %4d  total %.6f  S %.4f  g %+.5f  dofs %d  elems %d  rho_shift %.3f", it, bd.total, bd.S,
                     bd.g_mass, res.n_dofs, mesh.n_active, scheme.rho_shift)
            state = {"mesh": mesh, "basis": basis, "s": s.copy(), "analysis": res, "scheme": scheme}
            if out_dir and vtk_every and it % vtk_every == 0:
                vtk.write_snapshot(out_dir, it, mesh, basis, phi_coefficients(s, scheme), res.model, res.solution.u)
            if callback is not None:
                callback(it, row, state)
            ready = cfg.scheme != COMBINED or scheme.rho_shift >= 1.0
            if ready and check_convergence(objective_trace, bd.g_mass, cfg.tol):
                hist.converged = True
                break
            if it == n_iter - 1:
                break
            phase = "optimizer"
            g = res.gradients

            def trial(x):
                r = ev_fn(x, gradients=False)
                return r.breakdown.total, r.breakdown.g_mass

            s, _, info = gcmma_step(s, (bd.total, g.total), (bd.g_mass, g.g_mass), mma, trial)
        except Exception as exc:  # record where the run stopped
            raise RunError(it, phase, exc) from exc

    if out_dir:
        hist.write_csv(os.path.join(out_dir, "history.csv"))
        if state:
            vtk.write_snapshot(out_dir, len(hist.rows) - 1, state["mesh"], state["basis"],
                               phi_coefficients(state["s"], state["scheme"]), state["analysis"].model,
                               state["analysis"].solution.u)
        write_summary(os.path.join(out_dir, "final_summary.json"), cfg, hist, baseline, deterministic)
    return hist, state


def write_summary(path, cfg: RunConfig, hist: OptHistory, baseline: Optional[OptHistory], deterministic: bool):
    last = hist.rows[-1] if hist.rows else {}
    out = {"iterations": len(hist.rows), "converged": hist.converged, "final": last,
           "refinement_events": hist.events, "plane_stress": cfg.plane_stress, "deterministic": deterministic,
           "max_dofs_xfem": float(hist.xfem_dofs.max()) if hist.rows else 0.0,
           "sum_dofs_xfem": float(hist.xfem_dofs.sum()) if hist.rows else 0.0}
    if baseline is not None and hist.rows:
        e = efficiency_metrics(hist, baseline, 1.0)
        out["efficiency"] = dict(zip(("E_xfem", "R_xfem", "E_fem", "R_fem"), e))
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, default=float)
    return out


# ---------------------------------------------------------------------- CLI

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="thbtopo", description="Adaptive level-set topology optimisation of a 2D beam")
    ap.add_argument("--config", help="INI configuration file (defaults reproduce the beam setup)")
    ap.add_argument("--out-dir", default="run_out", help="directory for history.csv, VTK files and the summary")
    ap.add_argument("--vtk-every", type=int, default=0, help="write VTK snapshots every N iterations (0: final only)")
    ap.add_argument("--max-iters", type=int, default=None, help="override the iteration limit")
    ap.add_argument("--deterministic", action="store_true", help="fixed-order assembly and seeded randomness")
    ap.add_argument("--baseline", help="history.csv of a uniform run, for efficiency metrics")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    baseline = OptHistory.read_csv(args.baseline) if args.baseline else None
    try:
        hist, _ = run(cfg, args.out_dir, args.vtk_every, args.max_iters, args.deterministic, baseline)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    last = hist.rows[-1]
    print(f"iterations {len(hist.rows)}  converged {hist.converged}  S {last['S']:.4f}  "
          f"mass ratio {last['g_mass'] + cfg.c_m:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
