"""Time-averaged circuit model of n paralleled buck legs on a shared DC bus.

State ``x = [I_L1..I_Ln, U_C1..U_Cn]``, input ``u = [V_DC1..V_DCn, I_b]``,
disturbance ``w = I_load``, output ``y = [I_L1..I_Ln, V_o]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import matrix_exponential_action

__all__ = [
    "ConverterParams",
    "MfcsState",
    "MfcsInput",
    "StateSpaceModel",
    "assemble_continuous",
    "discretize",
    "bus_voltage",
    "total_capacitor_resistance",
    "circulating_current",
    "terminal_voltage_deviation",
    "steady_state",
]


@dataclass(frozen=True)
class ConverterParams:
    """One buck leg: output inductor/capacitor with their ESRs (SI units)."""

    l: float
    c: float
    r_l: float
    r_c: float
    i_l_max: float = 350.0

    def __post_init__(self):
        for name in ("l", "c", "r_l", "r_c", "i_l_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ConverterParams.{name} must be strictly positive")


@dataclass
class MfcsState:
    i_l: np.ndarray
    u_c: np.ndarray

    def __post_init__(self):
        self.i_l = np.asarray(self.i_l, dtype=float).reshape(-1)
        self.u_c = np.asarray(self.u_c, dtype=float).reshape(-1)
        if self.i_l.shape != self.u_c.shape:
            raise ValueError("i_l and u_c must have the same length")

    @property
    def n(self) -> int:
        return self.i_l.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.i_l, self.u_c])

    @classmethod
    def from_vector(cls, x) -> "MfcsState":
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n].copy(), x[n:].copy())

    @classmethod
    def zeros(cls, n: int) -> "MfcsState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class MfcsInput:
    v_dc: np.ndarray
    i_b: float = 0.0

    def __post_init__(self):
        self.v_dc = np.asarray(self.v_dc, dtype=float).reshape(-1)
        self.i_b = float(self.i_b)

    @property
    def n(self) -> int:
        return self.v_dc.size

    def to_vector(self) -> np.ndarray:
        return np.append(self.v_dc, self.i_b)

    @classmethod
    def from_vector(cls, u) -> "MfcsInput":
        u = np.asarray(u, dtype=float)
        return cls(u[:-1].copy(), u[-1])


@dataclass(frozen=True)
class StateSpaceModel:
    """``x' = a x + b u + e w``, ``y = c x + d u + f w``.

    ``time_step`` is 0 for the continuous model and the sampling time for a
    discrete one.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    e: np.ndarray
    f: np.ndarray
    time_step: float
    n_subsystems: int

    def __post_init__(self):
        n = self.n_subsystems
        shapes = {
            "a": (2 * n, 2 * n), "b": (2 * n, n + 1), "e": (2 * n, 1),
            "c": (n + 1, 2 * n), "d": (n + 1, n + 1), "f": (n + 1, 1),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def is_discrete(self) -> bool:
        return self.time_step > 0

    def output(self, x, u, w) -> np.ndarray:
        return self.c @ x + self.d @ u + self.f[:, 0] * w

    def derivative(self, x, u, w) -> np.ndarray:
        return self.a @ x + self.b @ u + self.e[:, 0] * w

    def next_state(self, x, u, w) -> np.ndarray:
        if not self.is_discrete:
            raise ValueError("next_state needs a discrete model")
        return self.a @ x + self.b @ u + self.e[:, 0] * w


def total_capacitor_resistance(params: Sequence[ConverterParams]) -> float:
    return 1.0 / sum(1.0 / p.r_c for p in params)


def assemble_continuous(params: Sequence[ConverterParams]) -> StateSpaceModel:
    """Aggregate state-space model of the paralleled legs with the bus eliminated.

    The bus voltage is the algebraic output ``V_o = phi4 x + phi5 u + phi6 w``;
    substituting it into the KVL equations ``x' = phi1 x + phi2 u + phi3 V_o``
    gives ``A = phi1 + phi3 phi4`` etc.
    """
    params = list(params)
    n = len(params)
    if n < 1:
        raise ValueError("need at least one converter leg")
    l = np.array([p.l for p in params])
    c = np.array([p.c for p in params])
    r_l = np.array([p.r_l for p in params])
    r_c = np.array([p.r_c for p in params])
    r_tot = total_capacitor_resistance(params)

    phi1 = np.block([
        [np.diag(-r_l / l), np.zeros((n, n))],
        [np.zeros((n, n)), np.diag(-1.0 / (r_c * c))],
    ])
    phi2 = np.block([
        [np.diag(1.0 / l), np.zeros((n, 1))],
        [np.zeros((n, n)), np.zeros((n, 1))],
    ])
    phi3 = np.concatenate([-1.0 / l, 1.0 / (r_c * c)]).reshape(-1, 1)
    phi4 = np.concatenate([np.full(n, r_tot), r_tot / r_c]).reshape(1, -1)
    phi5 = np.append(np.zeros(n), r_tot).reshape(1, -1)
    phi6 = np.array([[-r_tot]])

    a = phi1 + phi3 @ phi4
    b = phi2 + phi3 @ phi5
    e = phi3 @ phi6
    cm = np.vstack([np.hstack([np.eye(n), np.zeros((n, n))]), phi4])
    dm = np.vstack([np.zeros((n, n + 1)), phi5])
    fm = np.vstack([np.zeros((n, 1)), phi6])
    return StateSpaceModel(a, b, cm, dm, e, fm, 0.0, n)


def discretize(model: StateSpaceModel, tau: float) -> StateSpaceModel:
    """Zero-order-hold discretization of ``(B, E)`` via the augmented matrix exponential."""
    if model.is_discrete:
        raise ValueError("model is already discrete")
    if tau <= 0:
        raise ValueError("tau must be positive")
    nx = model.a.shape[0]
    nin = model.b.shape[1] + 1
    aug = np.zeros((nx + nin, nx + nin))
    aug[:nx, :nx] = model.a
    aug[:nx, nx:] = np.hstack([model.b, model.e])
    phi = matrix_exponential_action(aug, tau)
    ad = phi[:nx, :nx]
    bd = phi[:nx, nx:nx + nin - 1]
    ed = phi[:nx, nx + nin - 1:]
    return StateSpaceModel(ad, bd, model.c.copy(), model.d.copy(), ed, model.f.copy(), float(tau),
                           model.n_subsystems)


def bus_voltage(params: Sequence[ConverterParams], state: MfcsState, inp: MfcsInput, i_load: float) -> float:
    """Bus voltage from KCL at the bus with capacitors seen through their ESRs."""
    r_c = np.array([p.r_c for p in params])
    r_tot = total_capacitor_resistance(params)
    return float(r_tot * (np.sum(state.i_l + state.u_c / r_c) - i_load + inp.i_b))


def circulating_current(i_l, r_l, legs: tuple[int, int] = (0, 1)) -> float:
    """Circulating current from leg ``i`` into leg ``j`` (0-based leg indices)."""
    i, j = legs
    if i == j:
        raise ValueError("legs must be distinct")
    if r_l[i] <= 0 or r_l[j] <= 0:
        raise ValueError("ESRs must be positive")
    return (r_l[i] * i_l[i] - r_l[j] * i_l[j]) / (r_l[i] + r_l[j])


def terminal_voltage_deviation(v_dc) -> np.ndarray:
    """Per-leg terminal voltage minus the mean; the mitigation signal for n > 2."""
    v_dc = np.asarray(v_dc, dtype=float)
    return v_dc - v_dc.mean()


def steady_state(model: StateSpaceModel, u, w) -> np.ndarray:
    """Equilibrium state of a continuous model under constant ``u`` and ``w``."""
    if model.is_discrete:
        return np.linalg.solve(np.eye(model.a.shape[0]) - model.a, model.b @ u + model.e[:, 0] * w)
    return np.linalg.solve(model.a, -(model.b @ u + model.e[:, 0] * w))
