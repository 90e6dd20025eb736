"""Hankel-matrix predictor built from recorded trajectories."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .linalg import rank
from .simulator import TrajectoryLog

__all__ = [
    "build_hankel",
    "PersistencyStatus",
    "PersistencyReport",
    "PersistencyError",
    "check_persistency",
    "required_length",
    "HankelSystem",
    "assemble_predictor",
]

log = logging.getLogger(__name__)

RANK_TOL = 1e-8


def build_hankel(signal, depth: int) -> np.ndarray:
    """Block-Hankel matrix of ``depth`` block rows from a ``(T, dim)`` or length-``T`` signal.

    Block ``(i, j)`` is ``signal[i + j]``; the result is ``(dim*depth, T-depth+1)``.
    """
    s = np.asarray(signal, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    t, dim = s.shape
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if t < depth:
        raise ValueError(f"signal length {t} is shorter than the Hankel depth {depth}")
    cols = t - depth + 1
    h = np.empty((dim * depth, cols))
    for i in range(depth):
        h[i * dim:(i + 1) * dim, :] = s[i:i + cols].T
    return h


class PersistencyStatus(str, enum.Enum):
    OK = "ok"
    TOO_SHORT = "too_short"
    RANK_DEFICIENT = "rank_deficient"


@dataclass(frozen=True)
class PersistencyReport:
    status: PersistencyStatus
    length: int
    required_length: int
    rank: int | None = None
    required_rank: int | None = None
    conventional_length: int | None = None

    @property
    def ok(self) -> bool:
        return self.status is PersistencyStatus.OK


class PersistencyError(ValueError):
    def __init__(self, report: PersistencyReport):
        super().__init__(f"data not persistently exciting: {report}")
        self.report = report


def required_length(m: int, t_p: int, t_f: int) -> int:
    """Minimum record length ``(m+1)(t_p+t_f) - 1``."""
    return (m + 1) * (t_p + t_f) - 1


def _input_block(log_: TrajectoryLog, depth: int) -> np.ndarray:
    return np.vstack([build_hankel(log_.u, depth), build_hankel(log_.w, depth)])


def check_persistency(log_: TrajectoryLog, t_p: int, t_f: int) -> PersistencyReport:
    """Length test with ``m`` = output dimension, then full row rank of the input/load Hankel block."""
    if len(log_) == 0:
        raise ValueError("empty trajectory log")
    depth = t_p + t_f
    n_y = log_.y.shape[1]
    n_uw = log_.u.shape[1] + 1
    t = len(log_)
    need = required_length(n_y, t_p, t_f)
    conventional = required_length(n_uw, t_p, t_f)
    log.debug("record length %d; output-dimension bound %d, input-dimension bound %d", t, need, conventional)
    if t < need:
        return PersistencyReport(PersistencyStatus.TOO_SHORT, t, need, conventional_length=conventional)
    block = _input_block(log_, depth)
    r = rank(block, RANK_TOL)
    rows = block.shape[0]
    status = PersistencyStatus.OK if r == rows else PersistencyStatus.RANK_DEFICIENT
    return PersistencyReport(status, t, need, r, rows, conventional)


@dataclass(frozen=True)
class HankelSystem:
    """Past/future partition of the stacked Hankel matrices of ``y``, ``u`` and ``w``."""

    y_past: np.ndarray
    y_future: np.ndarray
    u_past: np.ndarray
    u_future: np.ndarray
    w_past: np.ndarray
    w_future: np.ndarray
    t_p: int
    t_f: int
    dims: tuple[int, int, int]

    @property
    def g_dim(self) -> int:
        return self.y_past.shape[1]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.y_past, self.y_future, self.u_past, self.u_future, self.w_past, self.w_future])

    def trajectory(self, g) -> dict[str, np.ndarray]:
        """Window implied by ``g``, each entry reshaped to ``(steps, dim)``."""
        n_y, n_u, n_w = self.dims
        g = np.asarray(g, dtype=float)
        return {
            "y_past": (self.y_past @ g).reshape(self.t_p, n_y),
            "y_future": (self.y_future @ g).reshape(self.t_f, n_y),
            "u_past": (self.u_past @ g).reshape(self.t_p, n_u),
            "u_future": (self.u_future @ g).reshape(self.t_f, n_u),
            "w_past": (self.w_past @ g).reshape(self.t_p, n_w),
            "w_future": (self.w_future @ g).reshape(self.t_f, n_w),
        }


def assemble_predictor(log_: TrajectoryLog, t_p: int, t_f: int) -> HankelSystem:
    report = check_persistency(log_, t_p, t_f)
    if not report.ok:
        raise PersistencyError(report)
    depth = t_p + t_f
    hy = build_hankel(log_.y, depth)
    hu = build_hankel(log_.u, depth)
    hw = build_hankel(log_.w, depth)
    n_y, n_u, n_w = log_.y.shape[1], log_.u.shape[1], 1
    return HankelSystem(
        hy[:n_y * t_p], hy[n_y * t_p:],
        hu[:n_u * t_p], hu[n_u * t_p:],
        hw[:n_w * t_p], hw[n_w * t_p:],
        t_p, t_f, (n_y, n_u, n_w),
    )
