"""Truncated linear conjugate gradient for damped curvature systems."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, LinearOperator, NumericError, ParamVector, dot, norm2

RESIDUAL_REFRESH_PERIOD = 10


class Termination(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    BREAKDOWN = "breakdown"


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20
    rtol: float = 1e-4
    warm_start_scale: float = 0.6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.rtol < 1.0:
            raise ValueError("rtol must be in (0, 1)")
        if not 0.0 <= self.warm_start_scale <= 1.0:
            raise ValueError("warm_start_scale must be in [0, 1]")


@dataclass
class SolverResult:
    x: ParamVector
    iterations: int
    residual_norm: float  # recomputed from scratch, not the recursive one
    termination: Termination


def cg_solve(
    a: LinearOperator, b: ParamVector, x0: ParamVector, cfg: SolverConfig
) -> SolverResult:
    """Standard CG from x0; stops at |r| <= rtol*|b| or max_iters.

    The recursive residual is refreshed from scratch every few iterations to
    bound drift. Non-positive curvature (only possible through round-off on
    a damped system) terminates with the current iterate.
    """
    if b.shape != (a.dim,) or x0.shape != (a.dim,):
        raise DimensionError(
            f"system dim {a.dim}, b shape {b.shape}, x0 shape {x0.shape}"
        )
    x = x0.copy()
    r = b - a.apply(x)
    r_is_fresh = True
    threshold = cfg.rtol * norm2(b)

    def finish(iterations: int, termination: Termination) -> SolverResult:
        true_residual = norm2(r) if r_is_fresh else norm2(b - a.apply(x))
        return SolverResult(x, iterations, true_residual, termination)

    if norm2(r) <= threshold:
        return finish(0, Termination.CONVERGED)
    p = r.copy()
    rs = dot(r, r)
    for k in range(1, cfg.max_iters + 1):
        ap = a.apply(p)
        pap = dot(p, ap)
        if pap <= 0.0:
            return finish(k, Termination.BREAKDOWN)
        alpha = rs / pap
        x = x + alpha * p
        if not np.all(np.isfinite(x)):
            raise NumericError("CG iterate is non-finite")
        if k % RESIDUAL_REFRESH_PERIOD == 0:
            r = b - a.apply(x)
            r_is_fresh = True
        else:
            r = r - alpha * ap
            r_is_fresh = False
        rs_new = dot(r, r)
        if np.sqrt(rs_new) <= threshold:
            return finish(k, Termination.CONVERGED)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return finish(cfg.max_iters, Termination.MAX_ITERS)
