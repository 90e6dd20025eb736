"""Dense convex QP solver.

Solves::

    minimize    1/2 x'Hx + f'x + offset
    subject to  Aeq x = beq
                lower <= x <= upper

with an over-relaxed ADMM iteration on the equilibrated problem, followed
by an active-set polish that recovers a high-accuracy KKT point from the
ADMM dual estimate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = ["QpStatus", "QpProblem", "QpSolution", "solve_qp", "kkt_residual"]

_RHO_EQ_FACTOR = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_SCALING_ITERS = 15


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass
class QpProblem:
    """Canonical QP. ``aeq`` may have zero rows; bounds may be infinite."""

    h: np.ndarray
    f: np.ndarray
    aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError(f"H must be square, got shape {h.shape}")
        n = h.shape[0]
        if not np.all(np.isfinite(h)):
            raise ValueError("H must be finite")
        scale = max(np.max(np.abs(h), initial=0.0), 1e-300)
        if np.max(np.abs(h - h.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("H is not symmetric")
        h = 0.5 * (h + h.T)
        if n:
            min_eig = np.linalg.eigvalsh(h)[0]
            if min_eig < -1e-10 * np.linalg.norm(h, 2):
                raise ValueError(f"H is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        self.h = h

        f = np.array(self.f, dtype=float).reshape(-1)
        if f.shape != (n,):
            raise ValueError(f"f must have length {n}, got {f.shape}")
        self.f = f

        aeq = np.zeros((0, n)) if self.aeq is None else np.array(self.aeq, dtype=float)
        if aeq.ndim == 1:
            aeq = aeq.reshape(1, -1)
        if aeq.shape[1] != n:
            raise ValueError(f"Aeq must have {n} columns, got {aeq.shape[1]}")
        beq = np.zeros(0) if self.beq is None else np.array(self.beq, dtype=float).reshape(-1)
        if beq.shape != (aeq.shape[0],):
            raise ValueError("beq length must equal the number of equality rows")
        if not (np.all(np.isfinite(aeq)) and np.all(np.isfinite(beq))):
            raise ValueError("equality data must be finite")
        self.aeq, self.beq = aeq, beq

        lo = np.full(n, -np.inf) if self.lower is None else np.array(self.lower, dtype=float).reshape(-1)
        up = np.full(n, np.inf) if self.upper is None else np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != (n,) or up.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(np.isnan(lo)) or np.any(np.isnan(up)) or np.any(lo > up):
            raise ValueError("bounds must satisfy lower <= upper")
        self.lower, self.upper = lo, up

    @property
    def n(self) -> int:
        return self.h.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.h @ x + self.f @ x + self.offset)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: QpStatus
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_residual(problem: QpProblem, x, lam, mu) -> float:
    """Scaled KKT residual of ``x`` with equality multipliers ``lam`` and bound multipliers ``mu``.

    Sign convention: ``H x + f + Aeq' lam + mu = 0`` with ``mu <= 0`` on active
    lower bounds and ``mu >= 0`` on active upper bounds.
    """
    p = problem
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)

    ax = p.aeq @ x
    r_eq = np.max(np.abs(ax - p.beq), initial=0.0)
    r_eq /= max(1.0, np.max(np.abs(p.beq), initial=0.0), np.max(np.abs(ax), initial=0.0))
    viol = np.maximum(np.maximum(p.lower - x, x - p.upper), 0.0)
    r_box = np.max(viol, initial=0.0) / max(1.0, np.max(np.abs(x), initial=0.0))

    hx = p.h @ x
    at_lam = p.aeq.T @ lam
    r_stat = np.max(np.abs(hx + p.f + at_lam + mu), initial=0.0)
    r_stat /= max(
        1.0,
        np.max(np.abs(hx), initial=0.0),
        np.max(np.abs(p.f), initial=0.0),
        np.max(np.abs(at_lam), initial=0.0),
        np.max(np.abs(mu), initial=0.0),
    )

    slack_lo = np.where(np.isfinite(p.lower), x - p.lower, np.inf)
    slack_up = np.where(np.isfinite(p.upper), p.upper - x, np.inf)
    comp = np.where(mu < 0, np.minimum(-mu, slack_lo), np.where(mu > 0, np.minimum(mu, slack_up), 0.0))
    r_comp = np.max(comp, initial=0.0)
    return float(max(r_eq, r_box, r_stat, r_comp))


class _Scaled:
    """Ruiz-equilibrated copy of the stacked-constraint form ``l <= A x <= u``."""

    def __init__(self, problem: QpProblem):
        p = problem
        n = p.n
        self.box_idx = np.flatnonzero(np.isfinite(p.lower) | np.isfinite(p.upper))
        meq = p.aeq.shape[0]
        a = np.vstack([p.aeq, np.eye(n)[self.box_idx]])
        l = np.concatenate([p.beq, p.lower[self.box_idx]])
        u = np.concatenate([p.beq, p.upper[self.box_idx]])
        self.meq = meq
        self.m = a.shape[0]

        hh, q = p.h.copy(), p.f.copy()
        d = np.ones(n)
        e = np.ones(self.m)
        c = 1.0
        for _ in range(_SCALING_ITERS):
            col = np.max(np.abs(hh), axis=0, initial=0.0)
            if self.m:
                col = np.maximum(col, np.max(np.abs(a), axis=0, initial=0.0))
            row = np.max(np.abs(a), axis=1, initial=0.0)
            dd = 1.0 / np.sqrt(_clip_norm(col))
            ee = 1.0 / np.sqrt(_clip_norm(row))
            hh = dd[:, None] * hh * dd[None, :]
            a = ee[:, None] * a * dd[None, :]
            q = dd * q
            d *= dd
            e *= ee
            gamma = max(np.mean(np.max(np.abs(hh), axis=0, initial=0.0)) if n else 0.0,
                        np.max(np.abs(q), initial=0.0))
            gamma = 1.0 / _clip_norm(np.array([gamma]))[0]
            hh *= gamma
            q *= gamma
            c *= gamma
        self.h, self.q, self.a = hh, q, a
        self.l, self.u = e * l, e * u
        self.d, self.e, self.c = d, e, c
        self.is_eq = np.isclose(l, u, rtol=0.0, atol=0.0)

    def unscale(self, xs, ys, zs):
        x = self.d * xs
        y = self.e * ys / self.c
        z = zs / self.e
        return x, y, z


def _clip_norm(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=float)
    v[v < 1e-4] = 1.0
    return np.minimum(v, 1e4)


def _split_multipliers(problem: QpProblem, sc: _Scaled, y: np.ndarray):
    lam = y[: sc.meq].copy()
    mu = np.zeros(problem.n)
    mu[sc.box_idx] = y[sc.meq:]
    return lam, mu


def _polish(problem: QpProblem, x0, lam0, mu0, tol: float, passes: int = 12):
    """Active-set refinement from an approximate primal-dual pair.

    Returns ``(x, lam, mu, residual)`` on success, else ``None``.
    """
    p = problem
    n = p.n
    finite_lo = np.isfinite(p.lower)
    finite_up = np.isfinite(p.upper)
    fixed = finite_lo & finite_up & (p.lower == p.upper)
    at_lo = finite_lo & ~fixed & ((x0 - p.lower) < -mu0)
    at_up = finite_up & ~fixed & ~at_lo & ((p.upper - x0) < mu0)
    meq = p.aeq.shape[0]
    seen = set()
    for _ in range(passes):
        key = (at_lo.tobytes(), at_up.tobytes())
        if key in seen:
            return None
        seen.add(key)
        act = np.flatnonzero(fixed | at_lo | at_up)
        val = np.where(at_up[act], p.upper[act], p.lower[act])
        a_act = np.vstack([p.aeq, np.eye(n)[act]])
        b_act = np.concatenate([p.beq, val])
        k = a_act.shape[0]
        kkt = np.block([[p.h, a_act.T], [a_act, np.zeros((k, k))]])
        rhs = np.concatenate([-p.f, b_act])
        sol = np.linalg.lstsq(kkt, rhs, rcond=1e-13)[0]
        x = sol[:n]
        lam = sol[n:n + meq]
        mu = np.zeros(n)
        mu[act] = sol[n + meq:]
        x[act] = val

        # dual sign and primal feasibility tests, scaled like the residual
        mscale = max(1.0, np.max(np.abs(mu), initial=0.0), np.max(np.abs(p.f), initial=0.0))
        xscale = max(1.0, np.max(np.abs(x), initial=0.0))
        wrong_lo = at_lo & (mu > tol * mscale)
        wrong_up = at_up & (mu < -tol * mscale)
        viol_lo = finite_lo & ~fixed & ~at_lo & ~at_up & (x < p.lower - tol * xscale)
        viol_up = finite_up & ~fixed & ~at_lo & ~at_up & (x > p.upper + tol * xscale)
        if not (wrong_lo.any() or wrong_up.any() or viol_lo.any() or viol_up.any()):
            x = np.clip(x, p.lower, p.upper)
            mu = np.where(at_lo, np.minimum(mu, 0.0), np.where(at_up, np.maximum(mu, 0.0), mu))
            res = kkt_residual(p, x, lam, mu)
            if res <= tol:
                return x, lam, mu, res
            return None
        at_lo = (at_lo & ~wrong_lo) | viol_lo
        at_up = (at_up & ~wrong_up) | viol_up
    return None


def solve_qp(
    problem: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 20000,
    *,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 25,
    eps_infeasible: float = 1e-6,
    warm_start: QpSolution | None = None,
    polish: bool = True,
) -> QpSolution:
    """Solve a convex QP to scaled KKT residual ``tol``.

    The returned ``x`` always satisfies the box bounds exactly. ``status`` is
    ``INFEASIBLE`` when a primal infeasibility certificate is found (the
    dual iterates diverge along a separating direction) and
    ``MAX_ITERATIONS`` when ``tol`` is not met within ``max_iter``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = problem
    n = p.n
    sc = _Scaled(p)
    m = sc.m

    def finish(x, lam, mu, it, status, res, polished=False):
        x = np.clip(x, p.lower, p.upper)
        return QpSolution(
            x=x,
            objective=p.objective(x),
            kkt_residual=res,
            iterations=it,
            status=status,
            eq_multipliers=lam,
            bound_multipliers=mu,
            polished=polished,
        )

    if warm_start is not None and warm_start.x.shape == (n,):
        xs = warm_start.x / sc.d
        y_full = np.concatenate([
            warm_start.eq_multipliers if warm_start.eq_multipliers.shape == (sc.meq,) else np.zeros(sc.meq),
            warm_start.bound_multipliers[sc.box_idx]
            if warm_start.bound_multipliers.shape == (n,) else np.zeros(m - sc.meq),
        ])
        ys = sc.c * y_full / sc.e
        if polish:
            lam, mu = _split_multipliers(p, sc, y_full)
            got = _polish(p, warm_start.x, lam, mu, tol)
            if got is not None:
                return finish(got[0], got[1], got[2], 0, QpStatus.OPTIMAL, got[3], True)
    else:
        xs = np.zeros(n)
        ys = np.zeros(m)
    zs = np.clip(sc.a @ xs, sc.l, sc.u)

    def rho_vector(r):
        rv = np.full(m, r)
        rv[sc.is_eq] = r * _RHO_EQ_FACTOR
        return rv

    rho_vec = rho_vector(rho)

    def factor(rv):
        k = sc.h + sigma * np.eye(n) + sc.a.T @ (rv[:, None] * sc.a)
        return scipy.linalg.cho_factor(k)

    chol = factor(rho_vec)
    a_un = np.vstack([p.aeq, np.eye(n)[sc.box_idx]])
    l_un = sc.l / sc.e
    u_un = sc.u / sc.e

    best = None
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * xs - sc.q + sc.a.T @ (rho_vec * zs - ys)
        xt = scipy.linalg.cho_solve(chol, rhs)
        zt = sc.a @ xt
        x_new = alpha * xt + (1.0 - alpha) * xs
        z_relax = alpha * zt + (1.0 - alpha) * zs
        z_new = np.clip(z_relax + ys / rho_vec, sc.l, sc.u)
        y_new = ys + rho_vec * (z_relax - z_new)
        dy = y_new - ys
        xs, zs, ys = x_new, z_new, y_new

        if it % check_every and it != max_iter:
            continue

        x, y, z = sc.unscale(xs, ys, zs)
        lam, mu = _split_multipliers(p, sc, y)
        xc = np.clip(x, p.lower, p.upper)
        res = kkt_residual(p, xc, lam, mu)
        if best is None or res < best[3]:
            best = (xc, lam, mu, res)
        if res <= tol:
            return finish(xc, lam, mu, it, QpStatus.OPTIMAL, res)
        if polish:
            got = _polish(p, x, lam, mu, tol)
            if got is not None:
                return finish(got[0], got[1], got[2], it, QpStatus.OPTIMAL, got[3], True)

        if m and _infeasibility_certificate(a_un, l_un, u_un, sc.e * dy / sc.c, eps_infeasible):
            return finish(x, lam, mu, it, QpStatus.INFEASIBLE, res)

        # residual balancing
        ax = sc.a @ xs
        prim = np.max(np.abs(ax - zs), initial=0.0) / max(
            np.max(np.abs(ax), initial=0.0), np.max(np.abs(zs), initial=0.0), 1e-30)
        hx = sc.h @ xs
        aty = sc.a.T @ ys
        dual = np.max(np.abs(hx + sc.q + aty), initial=0.0) / max(
            np.max(np.abs(hx), initial=0.0), np.max(np.abs(aty), initial=0.0),
            np.max(np.abs(sc.q), initial=0.0), 1e-30)
        if prim > 0 and dual > 0:
            new_rho = float(np.clip(rho * np.sqrt(prim / dual), _RHO_MIN, _RHO_MAX))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rho_vec = rho_vector(rho)
                chol = factor(rho_vec)

    xc, lam, mu, res = best
    return finish(xc, lam, mu, it, QpStatus.MAX_ITERATIONS, res)


def _infeasibility_certificate(a, l, u, dy, eps) -> bool:
    norm = np.max(np.abs(dy), initial=0.0)
    if norm <= 1e-12:
        return False
    dy = dy / norm
    if np.max(np.abs(a.T @ dy), initial=0.0) > eps:
        return False
    pos = np.maximum(dy, 0.0)
    neg = np.minimum(dy, 0.0)
    if np.any((pos > eps) & ~np.isfinite(u)) or np.any((neg < -eps) & ~np.isfinite(l)):
        return False
    support = np.sum(np.where(np.isfinite(u), u, 0.0) * pos) + np.sum(np.where(np.isfinite(l), l, 0.0) * neg)
    return support < -eps
