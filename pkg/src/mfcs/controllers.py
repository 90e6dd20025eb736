"""Stage cost, and the model-based and data-driven receding-horizon controllers.

Both controllers compile one QP per control step in the canonical form of
:mod:`mfcs.qp`:

* MPC decision vector ``[u_0..u_{Tf-1}, y_0..y_{Tf-1}]``; states are
  eliminated and the outputs kept as variables tied to the inputs by
  equality rows, so output limits stay simple bounds.
* DeePC decision vector ``[g, u_0..u_{Tf-1}, y_0..y_{Tf-1}, sigma]``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .circuit import MfcsInput, StateSpaceModel
from .hankel import HankelSystem
from .qp import QpProblem, QpSolution, QpStatus, solve_qp
from .simulator import Measurement

__all__ = [
    "CostWeights",
    "KMaps",
    "Constraints",
    "DeepcConfig",
    "ControllerError",
    "NotWarmError",
    "stage_cost",
    "build_mpc_qp",
    "build_deepc_qp",
    "zoh_forecast",
    "MpcController",
    "DeepcController",
    "SwitchedController",
]


class ControllerError(RuntimeError):
    """QP failure inside a control step; ``solution`` carries the diagnostics."""

    def __init__(self, message: str, solution: QpSolution | None = None):
        super().__init__(message)
        self.solution = solution


class NotWarmError(ControllerError):
    pass


def deviation_projector(n: int) -> np.ndarray:
    return np.eye(n) - np.full((n, n), 1.0 / n)


@dataclass(frozen=True)
class KMaps:
    """Linear maps that turn outputs/inputs into the three objective residuals.

    ``k1 y + k2u u - w`` is the load-following residual, ``s2 y - r`` the
    sharing and bus-voltage residual, ``k3 u`` the terminal-voltage imbalance.
    """

    k1: np.ndarray
    k2u: np.ndarray
    s2: np.ndarray
    k3: np.ndarray

    @classmethod
    def build(cls, n: int) -> "KMaps":
        p = deviation_projector(n)
        k1 = np.append(np.ones(n), 0.0).reshape(1, -1)
        k2u = np.append(np.zeros(n), 1.0).reshape(1, -1)
        s2 = np.zeros((n + 1, n + 1))
        s2[:n, :n] = p
        s2[n, n] = 1.0
        k3 = np.hstack([p, np.zeros((n, 1))])
        return cls(k1, k2u, s2, k3)

    @property
    def n(self) -> int:
        return self.k3.shape[0]


@dataclass(frozen=True)
class CostWeights:
    """Weights of the three objectives.

    ``r_battery`` adds ``r_battery * I_b**2`` to the control-effort term; 0
    leaves the battery current unpenalised.
    """

    q1: np.ndarray
    q2: np.ndarray
    r_w: np.ndarray
    v_bus_ref: float
    r_battery: float = 0.0

    def __post_init__(self):
        for name in ("q1", "q2", "r_w"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.shape[0] != m.shape[1] or np.max(np.abs(m - m.T), initial=0) > 1e-12 * max(1, np.abs(m).max()):
                raise ValueError(f"{name} must be a symmetric matrix")
            if np.linalg.eigvalsh(m)[0] < -1e-12 * max(1.0, np.abs(m).max()):
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)
        if self.q1.shape != (1, 1) or self.q2.shape[0] != self.r_w.shape[0] + 1:
            raise ValueError("weight dimensions do not match the K-maps")
        if self.r_battery < 0:
            raise ValueError("r_battery must be non-negative")

    @classmethod
    def default(cls, n: int, v_bus_ref: float = 120.0, *, q1: float = 10.0, q2_current: float = 1.0,
                q2_voltage: float = 50.0, r_imbalance: float = 0.1, r_battery: float = 0.0) -> "CostWeights":
        q2 = np.diag(np.append(np.full(n, q2_current), q2_voltage))
        return cls(np.array([[q1]]), q2, r_imbalance * np.eye(n), v_bus_ref, r_battery)

    @property
    def reference(self) -> np.ndarray:
        return np.append(np.zeros(self.r_w.shape[0]), self.v_bus_ref)


@dataclass(frozen=True)
class Constraints:
    """Output set (inductor current and bus voltage limits) and input set (duty and battery limits)."""

    i_l_max: np.ndarray
    v_o_min: float
    v_o_max: float
    i_b_max: float
    duty_min: float = 0.5
    duty_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "i_l_max", np.asarray(self.i_l_max, dtype=float).reshape(-1))
        if np.any(self.i_l_max <= 0) or not self.v_o_min < self.v_o_max or self.i_b_max < 0:
            raise ValueError("constraint limits must satisfy min < max")
        if not 0 <= self.duty_min < self.duty_max:
            raise ValueError("need 0 <= duty_min < duty_max")

    @classmethod
    def unbounded(cls, n: int) -> "Constraints":
        c = cls(np.full(n, np.inf), -np.inf, np.inf, np.inf)
        object.__setattr__(c, "duty_min", -np.inf)
        object.__setattr__(c, "duty_max", np.inf)
        return c

    def input_bounds(self, v_fc) -> tuple[np.ndarray, np.ndarray]:
        v_fc = np.asarray(v_fc, dtype=float)
        if np.any(v_fc <= 0):
            raise ValueError("measured stack voltages must be positive")
        with np.errstate(invalid="ignore"):
            lo = np.append(self.duty_min * v_fc, -self.i_b_max)
            hi = np.append(self.duty_max * v_fc, self.i_b_max)
        return lo, hi

    def output_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.append(np.where(np.isfinite(self.i_l_max), 0.0, -np.inf), self.v_o_min)
        hi = np.append(self.i_l_max, self.v_o_max)
        return lo, hi


@dataclass(frozen=True)
class DeepcConfig:
    """Regularisation and horizons; ``lambda_sigma = inf`` pins the slack to zero."""

    predictor: HankelSystem
    lambda_g: float = 1.0
    lambda_sigma: float = 1e5

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_sigma < 0:
            raise ValueError("regularisation weights must be non-negative")

    @property
    def t_p(self) -> int:
        return self.predictor.t_p

    @property
    def t_f(self) -> int:
        return self.predictor.t_f


def stage_cost(y, u, w: float, weights: CostWeights, kmaps: KMaps) -> float:
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    e1 = kmaps.k1 @ y + kmaps.k2u @ u - w
    e2 = kmaps.s2 @ y - weights.reference
    e3 = kmaps.k3 @ u
    j = float(e1 @ weights.q1 @ e1 + e2 @ weights.q2 @ e2 + e3 @ weights.r_w @ e3)
    return j + weights.r_battery * float(u[-1]) ** 2


class _Quadratic:
    """Accumulates ``sum (M z - c)' W (M z - c)`` as ``1/2 z'Hz + f'z + offset``."""

    def __init__(self, nz: int):
        self.h = np.zeros((nz, nz))
        self.f = np.zeros(nz)
        self.offset = 0.0

    def add(self, m, c, w):
        m = np.atleast_2d(m)
        c = np.atleast_1d(np.asarray(c, dtype=float))
        w = np.atleast_2d(w)
        mw = m.T @ w
        self.h += 2.0 * mw @ m
        self.f -= 2.0 * mw @ c
        self.offset += float(c @ w @ c)


def _add_stage_costs(q: _Quadratic, u_sel, y_sel, w_future, weights: CostWeights, kmaps: KMaps):
    """Add the stage cost of every horizon step; ``u_sel[k]``/``y_sel[k]`` pick ``u_k``/``y_k`` out of ``z``."""
    for k, wk in enumerate(w_future):
        q.add(kmaps.k1 @ y_sel[k] + kmaps.k2u @ u_sel[k], [wk], weights.q1)
        q.add(kmaps.s2 @ y_sel[k], weights.reference, weights.q2)
        q.add(kmaps.k3 @ u_sel[k], np.zeros(kmaps.n), weights.r_w)
        if weights.r_battery > 0:
            q.add(u_sel[k][-1:], [0.0], [[weights.r_battery]])


def _selectors(nz: int, start: int, steps: int, dim: int) -> list[np.ndarray]:
    out = []
    for k in range(steps):
        s = np.zeros((dim, nz))
        s[:, start + k * dim:start + (k + 1) * dim] = np.eye(dim)
        out.append(s)
    return out


def _horizon_bounds(steps, u_bounds, y_bounds):
    """Stacked input bounds over all steps and output bounds from step 1 on.

    ``y_0`` is fixed by the present state up to battery feedthrough, so it is
    left unbounded.
    """
    ny = y_bounds[0].size
    u_lo = np.tile(u_bounds[0], steps)
    u_hi = np.tile(u_bounds[1], steps)
    y_lo = np.concatenate([np.full(ny, -np.inf)] + [y_bounds[0]] * (steps - 1))
    y_hi = np.concatenate([np.full(ny, np.inf)] + [y_bounds[1]] * (steps - 1))
    return u_lo, u_hi, y_lo, y_hi


def zoh_forecast(w_now: float, steps: int) -> np.ndarray:
    return np.full(steps, float(w_now))


def mpc_prediction_matrices(model: StateSpaceModel, steps: int):
    """``Y = phi x0 + gamma U + psi W`` for the stacked outputs of a discrete model."""
    if not model.is_discrete:
        raise ValueError("MPC needs a discrete model")
    nx = model.a.shape[0]
    nu = model.b.shape[1]
    ny = model.c.shape[0]
    phi = np.zeros((steps * ny, nx))
    gamma = np.zeros((steps * ny, steps * nu))
    psi = np.zeros((steps * ny, steps))
    a_pow = [np.eye(nx)]
    for _ in range(steps):
        a_pow.append(model.a @ a_pow[-1])
    for k in range(steps):
        rows = slice(k * ny, (k + 1) * ny)
        phi[rows] = model.c @ a_pow[k]
        for j in range(k):
            gamma[rows, j * nu:(j + 1) * nu] = model.c @ a_pow[k - 1 - j] @ model.b
            psi[rows, j] = (model.c @ a_pow[k - 1 - j] @ model.e)[:, 0]
        gamma[rows, k * nu:(k + 1) * nu] = model.d
        psi[rows, k] = model.f[:, 0]
    return phi, gamma, psi


def build_mpc_qp(model: StateSpaceModel, x0, w_forecast, weights: CostWeights, kmaps: KMaps,
                 constraints: Constraints, v_fc) -> QpProblem:
    """Condensed MPC problem over ``[U, Y]`` for the current state ``x0``."""
    w_forecast = np.asarray(w_forecast, dtype=float).reshape(-1)
    steps = w_forecast.size
    nu = model.b.shape[1]
    ny = model.c.shape[0]
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != model.a.shape[0] or nu != kmaps.n + 1 or ny != kmaps.n + 1:
        raise ValueError("dimension mismatch between model, state and K-maps")
    phi, gamma, psi = mpc_prediction_matrices(model, steps)
    nz = steps * (nu + ny)
    u_sel = _selectors(nz, 0, steps, nu)
    y_sel = _selectors(nz, steps * nu, steps, ny)
    q = _Quadratic(nz)
    _add_stage_costs(q, u_sel, y_sel, w_forecast, weights, kmaps)

    aeq = np.hstack([-gamma, np.eye(steps * ny)])
    beq = phi @ x0 + psi @ w_forecast
    u_lo, u_hi, y_lo, y_hi = _horizon_bounds(steps, constraints.input_bounds(v_fc), constraints.output_bounds())
    return QpProblem(q.h, q.f, aeq, beq, np.concatenate([u_lo, y_lo]), np.concatenate([u_hi, y_hi]), q.offset)


def build_deepc_qp(cfg: DeepcConfig, y_p, u_p, w_p, w_f, weights: CostWeights, kmaps: KMaps,
                   constraints: Constraints, v_fc, y_anchor=None) -> QpProblem:
    """Regularised data-driven problem over ``[g, u_f, y_f, sigma]``.

    ``y_anchor`` optionally fixes components of the first predicted output
    to measured values (NaN entries stay free).
    """
    hs = cfg.predictor
    n_y, n_u, n_w = hs.dims
    y_p = np.asarray(y_p, dtype=float).reshape(-1)
    u_p = np.asarray(u_p, dtype=float).reshape(-1)
    w_p = np.asarray(w_p, dtype=float).reshape(-1)
    w_f = np.asarray(w_f, dtype=float).reshape(-1)
    if (y_p.size != n_y * hs.t_p or u_p.size != n_u * hs.t_p or w_p.size != n_w * hs.t_p
            or w_f.size != n_w * hs.t_f):
        raise ValueError("past/future windows do not match the predictor horizons")
    if n_u != kmaps.n + 1 or n_y != kmaps.n + 1:
        raise ValueError("predictor dimensions do not match the K-maps")

    g_dim = hs.g_dim
    nuf, nyf, ns = n_u * hs.t_f, n_y * hs.t_f, n_y * hs.t_p
    i_u = g_dim
    i_y = i_u + nuf
    i_s = i_y + nyf
    nz = i_s + ns
    u_sel = _selectors(nz, i_u, hs.t_f, n_u)
    y_sel = _selectors(nz, i_y, hs.t_f, n_y)
    q = _Quadratic(nz)
    _add_stage_costs(q, u_sel, y_sel, w_f, weights, kmaps)
    if cfg.lambda_g > 0:
        q.h[:g_dim, :g_dim] += 2.0 * cfg.lambda_g * np.eye(g_dim)
    pin_sigma = math.isinf(cfg.lambda_sigma)
    if not pin_sigma and cfg.lambda_sigma > 0:
        q.h[i_s:, i_s:] += 2.0 * cfg.lambda_sigma * np.eye(ns)

    def row_block(hmat, start=None, width=0, sign=-1.0):
        blk = np.zeros((hmat.shape[0], nz))
        blk[:, :g_dim] = hmat
        if start is not None:
            blk[:, start:start + width] = sign * np.eye(width)
        return blk

    aeq = np.vstack([
        row_block(hs.y_past, i_s, ns),
        row_block(hs.y_future, i_y, nyf),
        row_block(hs.u_past),
        row_block(hs.u_future, i_u, nuf),
        row_block(hs.w_past),
        row_block(hs.w_future),
    ])
    beq = np.concatenate([y_p, np.zeros(nyf), u_p, np.zeros(nuf), w_p, w_f])

    u_lo, u_hi, y_lo, y_hi = _horizon_bounds(hs.t_f, constraints.input_bounds(v_fc), constraints.output_bounds())
    if y_anchor is not None:
        y_anchor = np.asarray(y_anchor, dtype=float).reshape(-1)
        if y_anchor.size != n_y:
            raise ValueError("y_anchor must have one entry per output")
        fixed = ~np.isnan(y_anchor)
        y_lo[:n_y][fixed] = y_anchor[fixed]
        y_hi[:n_y][fixed] = y_anchor[fixed]
    s_bound = 0.0 if pin_sigma else np.inf
    lower = np.concatenate([np.full(g_dim, -np.inf), u_lo, y_lo, np.full(ns, -s_bound)])
    upper = np.concatenate([np.full(g_dim, np.inf), u_hi, y_hi, np.full(ns, s_bound)])
    return QpProblem(q.h, q.f, aeq, beq, lower, upper, q.offset)


@dataclass
class _Stats:
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


class _RecedingHorizon:
    tol = 1e-8
    max_iter = 20000

    def __init__(self, weights: CostWeights, kmaps: KMaps, constraints: Constraints, horizon: int):
        self.weights = weights
        self.kmaps = kmaps
        self.constraints = constraints
        self.horizon = horizon
        self.stats = _Stats()
        self.last_solution: QpSolution | None = None
        self.last_plan: dict | None = None

    def _solve(self, problem: QpProblem, t: float) -> QpSolution:
        sol = solve_qp(problem, self.tol, self.max_iter, warm_start=self.last_solution)
        self.stats.iterations.append(sol.iterations)
        self.stats.residuals.append(sol.kkt_residual)
        if sol.status is QpStatus.INFEASIBLE:
            raise ControllerError(f"QP infeasible at t={t:.4f} s (residual {sol.kkt_residual:.2e})", sol)
        if sol.status is not QpStatus.OPTIMAL:
            raise ControllerError(
                f"QP not solved at t={t:.4f} s: {sol.status.value}, residual {sol.kkt_residual:.2e} "
                f"after {sol.iterations} iterations", sol)
        self.last_solution = sol
        return sol


class MpcController(_RecedingHorizon):
    """Model-based controller using the full measured state."""

    def __init__(self, model: StateSpaceModel, weights: CostWeights, kmaps: KMaps, constraints: Constraints,
                 horizon: int = 2):
        super().__init__(weights, kmaps, constraints, horizon)
        if not model.is_discrete:
            raise ValueError("MPC needs a discrete model")
        self.model = model

    def plan(self, meas: Measurement) -> np.ndarray:
        x0 = meas.state.to_vector()
        w_f = zoh_forecast(meas.i_load, self.horizon)
        problem = build_mpc_qp(self.model, x0, w_f, self.weights, self.kmaps, self.constraints, meas.v_fc)
        sol = self._solve(problem, meas.t)
        nu = self.model.b.shape[1]
        u_f = sol.x[:self.horizon * nu].reshape(self.horizon, nu)
        y_f = sol.x[self.horizon * nu:].reshape(self.horizon, -1)
        self.last_plan = {"u_future": u_f, "y_future": y_f}
        return u_f

    def control(self, meas: Measurement) -> MfcsInput:
        return MfcsInput.from_vector(self.plan(meas)[0])

    def record(self, y, u, w) -> None:
        pass


class DeepcController(_RecedingHorizon):
    """Data-driven controller; needs ``t_p`` recorded samples before its first step.

    With ``anchor_currents`` the first predicted inductor currents are pinned
    to the present measurement, which is available before the input is
    chosen; the bus voltage is not anchored because the battery current
    feeds through to it.
    """

    def __init__(self, cfg: DeepcConfig, weights: CostWeights, kmaps: KMaps, constraints: Constraints,
                 anchor_currents: bool = True):
        super().__init__(weights, kmaps, constraints, cfg.t_f)
        self.cfg = cfg
        self.anchor_currents = anchor_currents
        self.past: deque = deque(maxlen=cfg.t_p)

    @property
    def warm(self) -> bool:
        return len(self.past) == self.cfg.t_p

    def plan(self, meas: Measurement) -> np.ndarray:
        if not self.warm:
            raise NotWarmError(f"DeePC needs {self.cfg.t_p} past samples, has {len(self.past)}")
        y_p = np.concatenate([p[0] for p in self.past])
        u_p = np.concatenate([p[1] for p in self.past])
        w_p = np.array([p[2] for p in self.past])
        w_f = zoh_forecast(meas.i_load, self.cfg.t_f)
        anchor = None
        if self.anchor_currents:
            anchor = np.append(meas.state.i_l, np.nan)
        problem = build_deepc_qp(self.cfg, y_p, u_p, w_p, w_f, self.weights, self.kmaps, self.constraints,
                                 meas.v_fc, anchor)
        sol = self._solve(problem, meas.t)
        hs = self.cfg.predictor
        n_y, n_u, _ = hs.dims
        g = sol.x[:hs.g_dim]
        u_f = sol.x[hs.g_dim:hs.g_dim + n_u * hs.t_f].reshape(hs.t_f, n_u)
        y_f = sol.x[hs.g_dim + n_u * hs.t_f:hs.g_dim + (n_u + n_y) * hs.t_f].reshape(hs.t_f, n_y)
        self.last_plan = {"g": g, "u_future": u_f, "y_future": y_f, "sigma": sol.x[hs.g_dim + (n_u + n_y) * hs.t_f:]}
        return u_f

    def control(self, meas: Measurement) -> MfcsInput:
        return MfcsInput.from_vector(self.plan(meas)[0])

    def record(self, y, u, w) -> None:
        self.past.append((np.array(y, dtype=float), np.array(u, dtype=float), float(w)))


class SwitchedController:
    """Runs ``before`` until ``activation_time`` and ``after`` from then on; both see every record."""

    def __init__(self, before, after, activation_time: float):
        self.before = before
        self.after = after
        self.activation_time = activation_time

    def control(self, meas: Measurement) -> MfcsInput:
        active = self.after if meas.t >= self.activation_time - 1e-12 else self.before
        return active.control(meas)

    def record(self, y, u, w) -> None:
        self.before.record(y, u, w)
        self.after.record(y, u, w)
