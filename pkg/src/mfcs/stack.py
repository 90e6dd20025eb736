"""PEMFC stack polarization model (activation + ohmic losses, quadratic degradation)."""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["StackParams", "StackDomainError", "stack_voltage", "degradation_loss"]


class StackDomainError(ValueError):
    """Stack current outside the rated range."""


@dataclass(frozen=True)
class StackParams:
    """Electrical parameters of one stack.

    ``deg_quadratic`` holds ``(d0, d1, d2)`` of the degradation loss
    ``d0 + d1*t + d2*t**2`` with ``t`` in seconds of operation.
    """

    e_oc: float
    act_coeff: float
    exchange_current: float
    r_fc: float
    deg_quadratic: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_count: int = 330
    i_rated_max: float = 250.0

    def __post_init__(self):
        if self.e_oc <= 0:
            raise ValueError("e_oc must be positive")
        if self.exchange_current <= 0:
            raise ValueError("exchange_current must be positive")
        if self.r_fc < 0 or self.act_coeff < 0:
            raise ValueError("r_fc and act_coeff must be non-negative")
        if len(self.deg_quadratic) != 3 or any(d < 0 for d in self.deg_quadratic):
            raise ValueError("deg_quadratic must be three non-negative coefficients")
        if self.cell_count < 1 or self.i_rated_max <= 0:
            raise ValueError("cell_count and i_rated_max must be positive")
        object.__setattr__(self, "deg_quadratic", tuple(float(d) for d in self.deg_quadratic))


def degradation_loss(params: StackParams, t_op: float) -> float:
    if t_op < 0:
        raise ValueError("t_op must be non-negative")
    d0, d1, d2 = params.deg_quadratic
    return d0 + d1 * t_op + d2 * t_op * t_op


def activation_loss(params: StackParams, i_fc: float) -> float:
    # clamp at the exchange current keeps the log finite and the loss >= 0
    i = max(i_fc, params.exchange_current)
    return params.act_coeff * math.log(i / params.exchange_current)


def stack_voltage(params: StackParams, i_fc: float, t_op: float = 0.0) -> float:
    """Stack terminal voltage at current ``i_fc`` after ``t_op`` seconds of operation."""
    if i_fc < 0 or i_fc > params.i_rated_max:
        raise StackDomainError(
            f"stack current {i_fc:.6g} A outside rated range [0, {params.i_rated_max:g}] A")
    return params.e_oc - activation_loss(params, i_fc) - params.r_fc * i_fc - degradation_loss(params, t_op)
