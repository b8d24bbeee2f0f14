"""Dense strictly-convex QP solver for the MPC layer.

    minimize    0.5 z'Hz + g'z + c
    subject to  lo <= G z <= hi

Operator-splitting (ADMM) method in the OSQP style: one Ruiz equilibration
pass at setup, a fixed step parameter rho (no adaptation, for determinism),
over-relaxation alpha = 1.6, and an active-set polish step that solves the
KKT system of the detected active constraints to push residuals to solver
tolerance.  All decisions are deterministic functions of the problem data,
so repeated solves are bit-identical.

Termination reports unscaled residuals: primal = max box violation of G z,
dual = || H z + g + G' y ||_inf.  Stopping tests are relative: each residual
is compared against tol * (1 + magnitude of the terms entering it), so badly
scaled objectives (e.g. large linear penalty terms) terminate correctly.
The dual vector y follows the convention y_i < 0 on active lower bounds,
y_i > 0 on active upper bounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_SIGMA = 1e-6
_ALPHA = 1.6
_RHO = 0.1
_RHO_EQ_SCALE = 1e3
_RUIZ_ITERS = 10
_CHECK_EVERY = 25
_POLISH_TRIGGER = 1e-2
_POLISH_DELTA = 1e-9
_EPS_INFEAS = 1e-8


@dataclass
class QpProblem:
    """Problem data; H must be symmetric, bounds may be +-inf but lo <= hi."""

    H: np.ndarray
    g: np.ndarray
    G: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        self.G = np.asarray(self.G, dtype=float)
        if self.G.ndim == 1:
            self.G = self.G.reshape(1, -1) if self.G.size else self.G.reshape(0, self.g.size)
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        n = self.g.size
        m = self.G.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H must be ({n}, {n}), got {self.H.shape}")
        if self.G.shape != (m, n):
            raise ValueError(f"G must have {n} columns, got {self.G.shape}")
        if self.lo.shape != (m,) or self.hi.shape != (m,):
            raise ValueError("lo and hi must match the number of constraint rows")
        if not np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0):
            raise ValueError("H must be symmetric")
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.g))
                and np.all(np.isfinite(self.G))):
            raise ValueError("H, g, G must be finite")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)):
            raise ValueError("bounds must not be NaN")
        if np.any(self.lo > self.hi):
            raise ValueError("need lo <= hi elementwise")
        self.H = 0.5 * (self.H + self.H.T)

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z + self.c)

    def save(self, path) -> None:
        data = {"H": self.H.tolist(), "g": self.g.tolist(), "G": self.G.tolist(),
                "lo": self.lo.tolist(), "hi": self.hi.tolist(), "c": self.c}
        with open(path, "w") as fh:
            json.dump(data, fh)  # Python json dialect: +-Infinity allowed
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "QpProblem":
        with open(path) as fh:
            d = json.load(fh)
        return cls(H=np.array(d["H"]), g=np.array(d["g"]), G=np.array(d["G"]),
                   lo=np.array(d["lo"]), hi=np.array(d["hi"]), c=d.get("c", 0.0))


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: str                  # "optimal" | "max_iterations" | "infeasible"
    iterations: int
    primal_residual: float
    dual_residual: float
    y: np.ndarray = field(default=None)  # type: ignore[assignment]
    merit_history: np.ndarray | None = None


@dataclass
class SolverCache:
    """Scaling and factorizations reusable across solves sharing (H, G).

    The cost scale depends on g, which changes between solves sharing a
    cache, so KKT factorizations are kept per observed cost scale. In MPC
    use the scale is dominated by constant penalty weights, so the map holds
    a single entry in practice.
    """

    d: np.ndarray            # variable scaling diag
    e: np.ndarray            # row scaling diag
    Hs: np.ndarray           # Ruiz-scaled H, unit cost scale
    Gs: np.ndarray
    rho: np.ndarray          # per-row step multiplier (boosted on eq rows)
    h_norm: float            # mean column norm of Hs, for the cost scale
    h_factor: tuple          # Cholesky of H + delta I, for polish with no active rows
    kkt_factors: dict = field(default_factory=dict)  # (cost, rho) -> factor

    def cost_scale(self, g: np.ndarray) -> float:
        gs = float(np.max(np.abs(self.d * g), initial=0.0))
        return 1.0 / max(self.h_norm, gs, 1e-12)

    def kkt_factor(self, cs: float, rho_scalar: float) -> tuple:
        key = (cs, rho_scalar)
        factor = self.kkt_factors.get(key)
        if factor is None:
            n = self.Hs.shape[0]
            M = cs * self.Hs + _SIGMA * np.eye(n)
            if self.Gs.shape[0]:
                rho = rho_scalar * self.rho
                M = M + (self.Gs * rho[:, None]).T @ self.Gs
            factor = cho_factor(M, lower=True)
            self.kkt_factors[key] = factor
        return factor


def build_cache(H: np.ndarray, G: np.ndarray, lo=None, hi=None) -> SolverCache:
    H = np.asarray(H, dtype=float)
    G = np.asarray(G, dtype=float)
    n = H.shape[0]
    m = G.shape[0]

    d = np.ones(n)
    e = np.ones(m)
    Hs = H.copy()
    Gs = G.copy()
    for _ in range(_RUIZ_ITERS):
        col = np.maximum(
            np.max(np.abs(Hs), axis=0),
            np.max(np.abs(Gs), axis=0) if m else 0.0)
        row = np.max(np.abs(Gs), axis=1) if m else np.empty(0)
        dd = 1.0 / np.sqrt(np.maximum(col, 1e-12))
        de = 1.0 / np.sqrt(np.maximum(row, 1e-12))
        Hs = Hs * dd[:, None] * dd[None, :]
        if m:
            Gs = Gs * de[:, None] * dd[None, :]
        d *= dd
        e *= de
    h_norm = float(np.mean(np.max(np.abs(Hs), axis=0))) if n else 0.0

    rho = np.ones(m)
    if m and lo is not None and hi is not None:
        eq = np.asarray(lo) == np.asarray(hi)
        rho[eq] = _RHO_EQ_SCALE

    h_factor = cho_factor(H + _POLISH_DELTA * np.eye(n), lower=True)
    return SolverCache(d=d, e=e, Hs=Hs, Gs=Gs, rho=rho, h_norm=h_norm,
                       h_factor=h_factor)


def _residuals(p: QpProblem, z: np.ndarray, y: np.ndarray):
    if p.m:
        gz = p.G @ z
        r_prim = float(np.max(np.abs(gz - np.clip(gz, p.lo, p.hi))))
        r_dual = float(np.max(np.abs(p.H @ z + p.g + p.G.T @ y)))
    else:
        r_prim = 0.0
        r_dual = float(np.max(np.abs(p.H @ z + p.g))) if p.n else 0.0
    return r_prim, r_dual


def _residual_scales(p: QpProblem, z: np.ndarray, y: np.ndarray,
                     w: np.ndarray | None = None):
    """Residuals plus relative scale factors, so stopping tolerances track
    the magnitudes of the terms entering each residual (a QP with a large
    linear cost would otherwise never pass an absolute test).

    With `w` (the projected constraint copy of the splitting iteration) the
    primal residual is the splitting gap |Gz - w|, which upper-bounds the box
    violation and also catches complementarity errors: y is nonzero only
    where w sits on a bound. Without it (polish candidates, where y is
    nonzero only on rows solved at their bounds) the box violation is used.
    """
    gz = p.G @ z
    tgt = np.clip(gz, p.lo, p.hi) if w is None else w
    r_prim = float(np.max(np.abs(gz - tgt)))
    hz = p.H @ z
    gty = p.G.T @ y
    r_dual = float(np.max(np.abs(hz + p.g + gty)))
    sc_prim = 1.0 + max(float(np.max(np.abs(gz))),
                        float(np.max(np.abs(tgt))))
    sc_dual = 1.0 + max(float(np.max(np.abs(hz))),
                        float(np.max(np.abs(gty))),
                        float(np.max(np.abs(p.g))))
    return r_prim, r_dual, sc_prim, sc_dual


def _try_polish(p: QpProblem, y_scaled: np.ndarray, cache: SolverCache, tol: float):
    """Solve the KKT system of the active set implied by the ADMM duals.

    Returns (z, y, r_prim, r_dual) on success, None if the candidate fails
    feasibility, stationarity, or multiplier-sign checks.
    """
    n = p.n
    # Relative activity threshold: the splitting leaves float dust (~1e-16
    # of the dual scale) on inactive rows, which must not enter the active
    # set. A row whose selected bound is infinite cannot be active either.
    y_mag = float(np.max(np.abs(y_scaled), initial=0.0))
    thresh = 1e-14 * y_mag
    low = (y_scaled < -thresh) & np.isfinite(p.lo)
    up = (y_scaled > thresh) & np.isfinite(p.hi)
    eq = p.lo == p.hi if p.m else np.empty(0, dtype=bool)
    low = low & ~eq
    up = up | eq
    idx = np.flatnonzero(low | up)
    na = idx.size

    if na == 0:
        z = -cho_solve(cache.h_factor, p.g)
        # one refinement step against the unregularized system
        z += -cho_solve(cache.h_factor, p.H @ z + p.g)
        y = np.zeros(p.m)
    else:
        G_a = p.G[idx]
        b_a = np.where(up[idx], p.hi[idx], p.lo[idx])
        K = np.zeros((n + na, n + na))
        K[:n, :n] = p.H + _POLISH_DELTA * np.eye(n)
        K[:n, n:] = G_a.T
        K[n:, :n] = G_a
        K[n:, n:] = -_POLISH_DELTA * np.eye(na)
        rhs = np.concatenate([-p.g, b_a])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        # two refinement steps against the unregularized KKT matrix
        for _ in range(2):
            res = rhs - np.concatenate([
                p.H @ sol[:n] + G_a.T @ sol[n:],
                G_a @ sol[:n]])
            try:
                sol = sol + np.linalg.solve(K, res)
            except np.linalg.LinAlgError:
                return None
        z = sol[:n]
        nu = sol[n:]
        sign_slack = 1e-9 * (1.0 + np.max(np.abs(nu)))
        bad_low = low[idx] & (nu > sign_slack)
        bad_up = up[idx] & ~eq[idx] & (nu < -sign_slack)
        if np.any(bad_low) or np.any(bad_up):
            return None
        y = np.zeros(p.m)
        y[idx] = nu
    if not np.all(np.isfinite(z)):
        return None
    r_prim, r_dual, sc_prim, sc_dual = _residual_scales(p, z, y)
    if r_prim <= tol * sc_prim and r_dual <= tol * sc_dual:
        return z, y, r_prim, r_dual
    return None


def solve_qp(p: QpProblem, tol: float = 1e-8, max_iter: int = 4000,
             cache: SolverCache | None = None, z0: np.ndarray | None = None,
             y0: np.ndarray | None = None, track_merit: bool = False) -> QpSolution:
    """Solve the QP.  Optional z0/y0 warm-start the splitting at that iterate;
    a start at the exact primal/dual optimum is a fixed point and returns
    immediately.  `cache` may be shared by solves with identical (H, G)."""
    n, m = p.n, p.m
    if cache is None:
        cache = build_cache(p.H, p.G, p.lo, p.hi)

    if m == 0:
        z = -cho_solve(cache.h_factor, p.g)
        z += -cho_solve(cache.h_factor, p.H @ z + p.g)
        r_prim, r_dual = _residuals(p, z, np.empty(0))
        return QpSolution(z=z, objective=p.objective(z), status="optimal",
                          iterations=0, primal_residual=r_prim,
                          dual_residual=r_dual, y=np.empty(0))

    d, e = cache.d, cache.e
    cs = cache.cost_scale(p.g)
    rho_scalar = _RHO
    kkt_factor = cache.kkt_factor(cs, rho_scalar)
    rho = rho_scalar * cache.rho
    qs = cs * (d * p.g)
    ls = e * p.lo
    us = e * p.hi

    # scaled iterates
    x = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float) / d
    if y0 is None:
        y = np.zeros(m)
    else:
        y = cs * np.asarray(y0, dtype=float) / e
    w = np.clip(cache.Gs @ x, ls, us)

    merit = [] if track_merit else None
    v_prev = None
    y_check_prev = e * y / cs
    best = None

    def unscaled(x, y):
        return d * x, e * y / cs

    iterations = 0
    status = "max_iterations"
    Gs_T = cache.Gs.T

    k = 0
    while True:
        if k % _CHECK_EVERY == 0 or k == max_iter:
            z_un, y_un = unscaled(x, y)
            r_prim, r_dual, sc_prim, sc_dual = _residual_scales(
                p, z_un, y_un, w / e)
            score = max(r_prim / sc_prim, r_dual / sc_dual)
            if best is None or score < best[2]:
                best = (z_un, y_un, score, r_prim, r_dual)
            if r_prim <= tol * sc_prim and r_dual <= tol * sc_dual:
                status = "optimal"
                iterations = k
                break
            # Polish detects the active set from the splitting duals and
            # solves its KKT system; at k == 0 a warm-started dual usually
            # carries the correct active set already, so this turns a warm
            # start into an active-set hot start.
            if (score <= _POLISH_TRIGGER) or k == 0 or k == max_iter:
                pol = _try_polish(p, y, cache, tol)
                if pol is not None:
                    z_un, y_un, r_prim, r_dual = pol
                    status = "optimal"
                    iterations = k
                    break
            if k > 0:
                dy = y_un - y_check_prev
                nrm = float(np.max(np.abs(dy))) if m else 0.0
                if nrm > 1e-14 and _is_infeasibility_certificate(p, dy, nrm):
                    status = "infeasible"
                    iterations = k
                    z_un, y_un = best[0], best[1]
                    r_prim, r_dual = best[3], best[4]
                    break
            y_check_prev = y_un
            if k == max_iter:
                iterations = k
                z_un, y_un = best[0], best[1]
                r_prim, r_dual = best[3], best[4]
                break
            # Step-size adaptation balancing the relative residuals; the
            # dual scale of a penalty-heavy problem is unreachable at any
            # fixed rho, so this is required for reliable termination.
            # Merit tracking promises a fixed-operator iteration and so
            # pins the step size instead.
            if merit is None:
                ratio = np.sqrt((r_prim / sc_prim)
                                / max(r_dual / sc_dual, 1e-16))
                raw = float(np.clip(rho_scalar * ratio, 1e-6, 1e6))
                # quantized to half-decades to bound the factorization cache
                proposal = 10.0 ** (round(2.0 * np.log10(raw)) / 2.0)
                if proposal > 5.0 * rho_scalar or proposal < 0.2 * rho_scalar:
                    rho_scalar = proposal
                    kkt_factor = cache.kkt_factor(cs, rho_scalar)
                    rho = rho_scalar * cache.rho

        rhs = _SIGMA * x - qs + Gs_T @ (rho * w - y)
        xt = cho_solve(kkt_factor, rhs)
        wt = cache.Gs @ xt
        x = _ALPHA * xt + (1.0 - _ALPHA) * x
        rel = _ALPHA * wt + (1.0 - _ALPHA) * w
        v = rel + y / rho
        w = np.clip(v, ls, us)
        y = y + rho * (rel - w)
        if merit is not None:
            if v_prev is not None:
                merit.append(float(np.linalg.norm(v - v_prev)))
            v_prev = v.copy()
        k += 1

    return QpSolution(z=z_un, objective=p.objective(z_un), status=status,
                      iterations=iterations, primal_residual=r_prim,
                      dual_residual=r_dual, y=y_un,
                      merit_history=np.array(merit) if merit is not None else None)


def _is_infeasibility_certificate(p: QpProblem, dy: np.ndarray, nrm: float) -> bool:
    dy = dy / nrm
    if float(np.max(np.abs(p.G.T @ dy))) > _EPS_INFEAS:
        return False
    pos = np.maximum(dy, 0.0)
    neg = np.minimum(dy, 0.0)
    hi_inf = ~np.isfinite(p.hi)
    lo_inf = ~np.isfinite(p.lo)
    if np.any(pos[hi_inf] > _EPS_INFEAS) or np.any(-neg[lo_inf] > _EPS_INFEAS):
        return False
    support = float(np.sum(p.hi[~hi_inf] * pos[~hi_inf])
                    + np.sum(p.lo[~lo_inf] * neg[~lo_inf]))
    return support <= -_EPS_INFEAS


def warm_start(p: QpProblem, z0: np.ndarray, y0: np.ndarray | None = None,
               tol: float = 1e-8, max_iter: int = 4000,
               cache: SolverCache | None = None,
               track_merit: bool = False) -> QpSolution:
    """solve_qp started from a previous iterate (primal z0, optionally dual y0)."""
    return solve_qp(p, tol=tol, max_iter=max_iter, cache=cache, z0=z0, y0=y0,
                    track_merit=track_merit)
