"""Globally convergent method of moving asymptotes for one inequality constraint.

The separable convex subproblem is solved through its one-dimensional dual
by bisection on the constraint multiplier.  The conservativeness loop follows
Svanberg's globally convergent variant: if the approximations underestimate
the true functions at the trial point their curvature terms are raised and
the subproblem is solved again.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


class MmaError(ValueError):
    pass


@dataclasses.dataclass
class MmaState:
    xmin: np.ndarray
    xmax: np.ndarray
    asyinit: float = 0.05
    asydecr: float = 0.65
    asyincr: float = 1.05
    max_inner: int = 20
    low: Optional[np.ndarray] = None
    upp: Optional[np.ndarray] = None
    xold1: Optional[np.ndarray] = None
    xold2: Optional[np.ndarray] = None
    outer: int = 0
    inner_history: list = dataclasses.field(default_factory=list)  # conservativeness per inner pass

    @classmethod
    def create(cls, n: int, lower=0.0, upper=1.0, **kw) -> "MmaState":
        return cls(np.broadcast_to(np.asarray(lower, float), (n,)).copy(),
                   np.broadcast_to(np.asarray(upper, float), (n,)).copy(), **kw)

    def reset(self, n: Optional[int] = None, lower=None, upper=None):
        """Forget iterate history; the next step restarts with the initial asymptote spread."""
        if n is not None:
            lo = self.xmin[0] if lower is None else lower
            hi = self.xmax[0] if upper is None else upper
            self.xmin = np.broadcast_to(np.asarray(lo, float), (n,)).copy()
            self.xmax = np.broadcast_to(np.asarray(hi, float), (n,)).copy()
        self.low = self.upp = self.xold1 = self.xold2 = None
        self.outer = 0

    def update_asymptotes(self, x):
        span = np.maximum(self.xmax - self.xmin, 1e-12)
        if self.xold2 is None:
            self.low = x - self.asyinit * span
            self.upp = x + self.asyinit * span
            return
        z = (x - self.xold1) * (self.xold1 - self.xold2)
        gam = np.where(z > 0, self.asyincr, np.where(z < 0, self.asydecr, 1.0))
        low = x - gam * (self.xold1 - self.low)
        upp = x + gam * (self.upp - self.xold1)
        self.low = np.clip(low, x - 10 * span, x - 0.01 * span)
        self.upp = np.clip(upp, x + 0.01 * span, x + 10 * span)


@dataclasses.dataclass
class _Approx:
    p: np.ndarray  # (2, n)
    q: np.ndarray
    r: np.ndarray  # (2,)

    def value(self, x, low, upp):
        return (self.p / (upp - x)).sum(axis=1) + (self.q / (x - low)).sum(axis=1) + self.r


def _approx(x, fvals, grads, low, upp, rho, span):
    gp = np.maximum(grads, 0.0)
    gm = np.maximum(-grads, 0.0)
    extra = rho[:, None] / span[None, :]
    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2
    p = ux2 * (1.001 * gp + 0.001 * gm + extra)
    q = xl2 * (0.001 * gp + 1.001 * gm + extra)
    r = fvals - (p / (upp - x)).sum(axis=1) - (q / (x - low)).sum(axis=1)
    return _Approx(p, q, r)


def _solve_sub(ap: _Approx, low, upp, alpha, beta, c: float = 1e4, tol: float = 1e-12):
    """Minimise the separable approximation of f subject to the approximate constraint."""

    def xstar(lam):
        P = ap.p[0] + lam * ap.p[1]
        Q = ap.q[0] + lam * ap.q[1]
        sp, sq = np.sqrt(P), np.sqrt(Q)
        x = np.where(sp + sq > 0, (low * sp + upp * sq) / np.where(sp + sq > 0, sp + sq, 1.0), 0.5 * (low + upp))
        return np.clip(x, alpha, beta)

    def gval(lam):
        return ap.value(xstar(lam), low, upp)[1]

    if gval(0.0) <= 0:
        return xstar(0.0), 0.0
    lo, hi = 0.0, 1.0
    while gval(hi) > 0 and hi < c:
        lo, hi = hi, hi * 2
    if gval(hi) > 0:  # constraint cannot be met inside the move limits: take the least violating point
        return xstar(hi), hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gval(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return xstar(hi), hi


def gcmma_step(x, f: Tuple[float, np.ndarray], g: Tuple[float, np.ndarray], state: MmaState,
               evaluate: Optional[Callable] = None):
    """One outer iteration; ``evaluate(x) -> (f, g)`` provides function values at trial points.

    Returns ``(x_next, state, info)``.  Without ``evaluate`` the plain MMA
    step is taken (no conservativeness check).
    """
    x = np.asarray(x, dtype=float)
    f0, df = float(f[0]), np.asarray(f[1], dtype=float)
    g0, dg = float(g[0]), np.asarray(g[1], dtype=float)
    if not (np.isfinite(f0) and np.isfinite(g0) and np.all(np.isfinite(df)) and np.all(np.isfinite(dg))):
        raise MmaError("non-finite objective, constraint or gradient")
    if x.shape != df.shape or x.shape != dg.shape or x.shape != state.xmin.shape:
        raise MmaError("design, gradient and bound sizes differ")
    x = np.clip(x, state.xmin, state.xmax)
    free = state.xmax > state.xmin  # pinned variables stay where they are
    state.update_asymptotes(x)
    xf = x[free]
    low, upp = state.low[free], state.upp[free]
    xmin, xmax = state.xmin[free], state.xmax[free]
    span = xmax - xmin
    alpha = np.maximum.reduce([xmin, low + 0.1 * (xf - low), xf - 0.5 * span])
    beta = np.minimum.reduce([xmax, upp - 0.1 * (upp - xf), xf + 0.5 * span])
    fv = np.array([f0, g0])
    G = np.stack([df[free], dg[free]])
    rho = np.maximum(0.1 / max(len(xf), 1) * np.abs(G) @ span, 1e-6)
    history = [rho.copy()]
    info = {"inner": 0, "conservative": True, "lam": 0.0}
    xn = x.copy()
    while True:
        ap = _approx(xf, fv, G, low, upp, rho, span)
        xnf, lam = _solve_sub(ap, low, upp, alpha, beta)
        xn[free] = xnf
        info["lam"] = lam
        if evaluate is None:
            break
        fn = np.array(evaluate(xn), dtype=float)
        info["f_trial"] = fn
        tilde = ap.value(xnf, low, upp)
        short = fn - tilde
        if np.all(short <= 1e-10 * (1 + np.abs(fn))):
            break
        if info["inner"] >= state.max_inner:
            log.warning("GCMMA inner loop hit %d iterations; accepting last iterate", state.max_inner)
            info["conservative"] = False
            break
        dval = np.sum((upp - low) * (xnf - xf) ** 2 / ((upp - xnf) * (xnf - low) * span))
        dval = max(dval, 1e-300)
        delta = np.where(short > 0, short / dval, 0.0)
        rho = np.where(short > 0, np.minimum(1.1 * (rho + delta), 10 * rho), rho)
        history.append(rho.copy())
        info["inner"] += 1
    state.inner_history = history
    state.xold2 = state.xold1
    state.xold1 = x.copy()
    state.outer += 1
    return np.clip(xn, state.xmin, state.xmax), state, info


def check_convergence(history: Sequence[float], constraint: float, tol: float = 1e-5,
                      slack: float = 1e-6) -> bool:
    """Objective change relative to the mean of the five previous values, with a feasible constraint."""
    h = np.asarray(history, dtype=float)
    if len(h) < 6:
        return False
    mean = np.mean(h[-6:-1])
    if mean == 0:
        return False
    return bool(abs(h[-1] - h[-2]) / abs(mean) < tol and constraint <= slack)


__all__ = ["MmaState", "gcmma_step", "check_convergence", "MmaError"]
