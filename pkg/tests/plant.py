"""Dual-stack test plant with the bundled scenario's parameter values."""

from __future__ import annotations

import numpy as np

from mfcs.circuit import ConverterParams, assemble_continuous, discretize
from mfcs.simulator import Leg, TrajectoryLog
from mfcs.stack import StackParams

STACK = StackParams(313.5, 9.01, 0.01, 0.0325, (0.0, 0.0, 0.0), 330, 250.0)
R_L = (14.9e-3, 16.1e-3)


def converters(r_l=R_L, l=100e-6, c=1e-3, r_c=5e-3):
    return [ConverterParams(l, c, r, r_c) for r in r_l]


def legs(r_l=R_L):
    return [Leg(STACK, cv) for cv in converters(r_l)]


def discrete_model(tau=1e-3, r_l=R_L):
    return discretize(assemble_continuous(converters(r_l)), tau)


def lti_record(model, steps, seed, x0=None, u_op=(123.0, 123.2, 0.0), w_op=400.0, du=2.0, dw=10.0):
    """Noise-free data from the discrete model with uniform dither; returns the log and the visited states."""
    rng = np.random.default_rng(seed)
    n = model.n_subsystems
    x = np.zeros(2 * n) if x0 is None else np.array(x0, dtype=float)
    u_op = np.asarray(u_op, dtype=float)
    xs, ys, us, ws = [], [], [], []
    for _ in range(steps):
        u = u_op + np.append(rng.uniform(-du, du, n), rng.uniform(-5 * du, 5 * du))
        w = w_op + rng.uniform(-dw, dw)
        xs.append(x)
        ys.append(model.output(x, u, w))
        us.append(u)
        ws.append(w)
        x = model.next_state(x, u, w)
    tau = model.time_step
    log = TrajectoryLog(np.arange(steps) * tau, np.array(ys), np.array(us), np.array(ws),
                        np.full((steps, n), 225.0), np.array(us)[:, :n] / 225.0, np.zeros(steps))
    return log, np.array(xs)
