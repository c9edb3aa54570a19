"""The optimizers: minibatch SGD, natural gradient descent with
Levenberg-Marquardt damping, and natural conjugate gradient with a joint 2-D
step/correction search.

All steps are pure: they take a state, return a new state plus a report, and
never mutate the model template. A rejected step leaves the parameters
bitwise unchanged and strictly increases the damping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .core import Matrix, ParamVector, dot, norm2
from .metric import MetricOperator, OutputModel
from .model import Batch, Mlp, gradient, loss
from .solver import SolverConfig, SolverResult, cg_solve

LAMBDA_MIN = 1e-10
LAMBDA_MAX = 1e10
ALPHA_EPS = 1e-12
ARMIJO_C = 1e-4
MAX_BACKTRACKS = 20
NCG_INITIAL_ALPHA = 0.3
NM_MAX_EVALS = 40


class ReductionRatioUndefined(ZeroDivisionError):
    """The predicted reduction is zero; the ratio carries no information."""


def lm_update(lam: float, rho: float) -> float:
    """Levenberg-Marquardt damping update driven by the reduction ratio."""
    if rho > 0.75:
        lam = lam * (2.0 / 3.0)
    elif rho < 0.25:
        lam = lam * 1.5
    return float(np.clip(lam, LAMBDA_MIN, LAMBDA_MAX))


def reduction_ratio(
    f_before: float, f_after: float, g: ParamVector, x: ParamVector, gamma: float
) -> float:
    """Realized loss change divided by the first-order predicted change for
    the step theta - gamma*x."""
    denom = -gamma * dot(g, x)
    if denom == 0.0:
        raise ReductionRatioUndefined("zero predicted reduction")
    return (f_after - f_before) / denom


def line_search_backtracking(
    loss_fn: Callable[[ParamVector], float],
    theta: ParamVector,
    direction: ParamVector,
    grad: ParamVector,
    gamma0: float,
) -> float:
    """Largest gamma in {gamma0 * 0.5^k} satisfying the Armijo condition for
    the step theta - gamma*direction; 0.0 signals that none qualified."""
    f0 = loss_fn(theta)
    slope = dot(grad, direction)
    for k in range(MAX_BACKTRACKS + 1):
        gamma = gamma0 * 0.5**k
        f_try = loss_fn(theta - gamma * direction)
        if np.isfinite(f_try) and f_try <= f0 - ARMIJO_C * gamma * slope:
            return gamma
    return 0.0


def sgd_step(theta: ParamVector, model: Mlp, batch: Batch, om: OutputModel, lr: float) -> ParamVector:
    if lr < 0:
        raise ValueError("lr must be >= 0")
    g = gradient(model.with_params(theta), batch, om)
    return theta - lr * g


@dataclass
class NgdState:
    theta: ParamVector
    lam: float
    x_warm: ParamVector
    lr: float
    line_search: bool = False
    step_count: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("damping must stay strictly positive during training")


@dataclass
class NcgState:
    theta: ParamVector
    lam: float
    d_prev: ParamVector
    x_warm: ParamVector
    steps_since_reset: int = 0
    reset_period: int = 30
    last_alpha: float = NCG_INITIAL_ALPHA
    last_beta: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("damping must stay strictly positive during training")


@dataclass
class StepReport:
    loss_before: float
    loss_after: float
    predicted_reduction: float
    rho: float
    cg: SolverResult | None
    lam_after: float
    accepted: bool
    gamma: float
    grad_norm: float


def fresh_ngd_state(model: Mlp, lam0: float, lr: float, line_search: bool = False) -> NgdState:
    p = model.param_count
    return NgdState(model.flatten(), lam0, np.zeros(p), lr, line_search)


def fresh_ncg_state(model: Mlp, lam0: float, reset_period: int = 30) -> NcgState:
    p = model.param_count
    return NcgState(model.flatten(), lam0, np.zeros(p), np.zeros(p), reset_period=reset_period)


def natural_direction(
    op: MetricOperator, g: ParamVector, x_warm: ParamVector, cfg: SolverConfig
) -> SolverResult:
    """Solve (G + lambda I) x = g, warm-started from the scaled previous
    solution."""
    return cg_solve(op, g, cfg.warm_start_scale * x_warm, cfg)


def _rho_and_lambda(
    lam: float, f_before: float, f_after: float, predicted: float
) -> tuple[float, float]:
    # Zero prediction means the ratio is undefined; damping is left alone.
    if predicted == 0.0:
        return 0.0, lam
    rho = (f_after - f_before) / (-predicted)
    return rho, lm_update(lam, rho)


def ngd_step(
    model: Mlp,
    state: NgdState,
    grad_batch: Batch,
    metric_inputs: Matrix,
    om: OutputModel,
    cfg: SolverConfig,
    line_search_batch: Batch | None = None,
) -> tuple[NgdState, StepReport]:
    """One damped natural-gradient step.

    The metric may be evaluated on any input batch (same minibatch, a
    disjoint train batch, or unlabeled data); it never needs targets.
    By default the line search scores candidate steps on the gradient batch
    itself, which can overfit that minibatch; pass ``line_search_batch`` to
    score on held-out data instead.
    """
    m = model.with_params(state.theta)
    g = gradient(m, grad_batch, om)
    f_before = loss(m, grad_batch, om)
    op = MetricOperator(m, metric_inputs, om, state.lam)
    res = natural_direction(op, g, state.x_warm, cfg)
    x = res.x

    def loss_at(theta: ParamVector) -> float:
        return loss(model.with_params(theta), grad_batch, om)

    if state.line_search:
        search_batch = grad_batch if line_search_batch is None else line_search_batch

        def search_loss(theta: ParamVector) -> float:
            return loss(model.with_params(theta), search_batch, om)

        gamma = line_search_backtracking(search_loss, state.theta, x, g, state.lr)
    else:
        gamma = state.lr

    rejected = gamma == 0.0
    if not rejected:
        theta_new = state.theta - gamma * x
        f_after = loss_at(theta_new)
        rejected = not np.isfinite(f_after)
    if rejected:
        lam_after = float(np.clip(state.lam * 2.0, LAMBDA_MIN, LAMBDA_MAX))
        report = StepReport(
            f_before, f_before, 0.0, 0.0, res, lam_after, False, 0.0, norm2(g)
        )
        return replace(state, lam=lam_after), report

    predicted = gamma * dot(g, x)
    rho, lam_after = _rho_and_lambda(state.lam, f_before, f_after, predicted)
    new_state = NgdState(
        theta_new, lam_after, res.x, state.lr, state.line_search, state.step_count + 1
    )
    report = StepReport(
        f_before, f_after, predicted, rho, res, lam_after, True, gamma, norm2(g)
    )
    return new_state, report


def ncg_direction_update(
    x: ParamVector, d_prev: ParamVector, alpha: float, beta: float
) -> ParamVector:
    """New search direction x + (beta/alpha) d_prev; plain natural direction
    when alpha is numerically zero."""
    if abs(alpha) < ALPHA_EPS:
        return x.copy()
    return x + (beta / alpha) * d_prev


def line_minimize(
    f: Callable[[float], float], gamma0: float, max_evals: int = 20
) -> tuple[float, float]:
    """Derivative-free 1-D minimization: expand a bracket from gamma0, then
    golden-section refine. Returns (argmin, value) over the points probed;
    non-finite values are treated as +inf."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    evals = 0

    def probe(g: float) -> float:
        nonlocal evals
        evals += 1
        val = f(g)
        return float(val) if np.isfinite(val) else np.inf

    best_g, best_f = gamma0, probe(gamma0)
    # expand or shrink by powers of two toward lower values
    step = 2.0 if probe(2.0 * gamma0) < best_f else 0.5
    g = gamma0
    while evals < max_evals // 2:
        nxt = g * step
        val = probe(nxt)
        if val >= best_f:
            break
        best_g, best_f = nxt, val
        g = nxt
    lo, hi = best_g / 2.0, best_g * 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = probe(c), probe(d)
    while evals < max_evals:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = probe(c)
            if fc < best_f:
                best_g, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = probe(d)
            if fd < best_f:
                best_g, best_f = d, fd
    return best_g, best_f


def nelder_mead_2d(
    f: Callable[[float, float], float],
    simplex: list[tuple[float, float]],
    max_evals: int = NM_MAX_EVALS,
) -> tuple[tuple[float, float], float, int]:
    """Minimize a 2-D function without derivatives.

    Non-finite evaluations are treated as +inf, which steers the simplex
    back into the finite region. Returns the best point, its value and the
    number of finite evaluations seen.
    """
    finite_evals = 0
    evals = 0

    def probe(pt):
        nonlocal finite_evals, evals
        evals += 1
        val = f(pt[0], pt[1])
        if np.isfinite(val):
            finite_evals += 1
            return float(val)
        return np.inf

    pts = [np.array(p, dtype=float) for p in simplex]
    vals = [probe(p) for p in pts]
    while evals < max_evals:
        order = np.argsort(vals, kind="stable")
        pts = [pts[i] for i in order]
        vals = [vals[i] for i in order]
        centroid = 0.5 * (pts[0] + pts[1])
        reflected = centroid + (centroid - pts[2])
        f_r = probe(reflected)
        if f_r < vals[0]:
            expanded = centroid + 2.0 * (centroid - pts[2])
            f_e = probe(expanded)
            if f_e < f_r:
                pts[2], vals[2] = expanded, f_e
            else:
                pts[2], vals[2] = reflected, f_r
        elif f_r < vals[1]:
            pts[2], vals[2] = reflected, f_r
        else:
            contracted = centroid + 0.5 * (pts[2] - centroid)
            f_c = probe(contracted)
            if f_c < vals[2]:
                pts[2], vals[2] = contracted, f_c
            else:  # shrink toward the best vertex
                for i in (1, 2):
                    pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
                    vals[i] = probe(pts[i])
    best = int(np.argmin(vals))
    return (float(pts[best][0]), float(pts[best][1])), float(vals[best]), finite_evals


def ncg_step(
    model: Mlp,
    state: NcgState,
    grad_batch: Batch,
    metric_inputs: Matrix,
    om: OutputModel,
    cfg: SolverConfig,
) -> tuple[NcgState, StepReport]:
    """One natural-conjugate-gradient step: solve for the natural direction,
    then jointly pick the step size and the previous-direction correction by
    minimizing the batch loss over (alpha, beta).

    Every reset_period-th step forces beta = 0 (a pure natural step). The
    first step, with no history, reduces to a line-searched natural step.
    """
    m = model.with_params(state.theta)
    g = gradient(m, grad_batch, om)
    f_before = loss(m, grad_batch, om)
    op = MetricOperator(m, metric_inputs, om, state.lam)
    res = natural_direction(op, g, state.x_warm, cfg)
    x = res.x
    d_prev = state.d_prev
    grad_norm = norm2(g)

    def loss_at(theta: ParamVector) -> float:
        return loss(model.with_params(theta), grad_batch, om)

    counter = state.steps_since_reset + 1
    forced_reset = counter == state.reset_period
    no_history = norm2(d_prev) == 0.0

    def reject() -> tuple[NcgState, StepReport]:
        lam_after = float(np.clip(state.lam * 2.0, LAMBDA_MIN, LAMBDA_MAX))
        report = StepReport(
            f_before, f_before, 0.0, 0.0, res, lam_after, False, 0.0, grad_norm
        )
        return replace(state, lam=lam_after), report

    gamma0 = state.last_alpha if state.last_alpha > 0 else NCG_INITIAL_ALPHA
    if no_history:
        # no previous direction: this is exactly a line-searched natural step
        alpha = line_search_backtracking(loss_at, state.theta, x, g, gamma0)
        if alpha == 0.0:
            return reject()
        beta = 0.0
        f_after = loss_at(state.theta - alpha * x)
    elif forced_reset:
        # pure natural step, step size from a 1-D derivative-free search
        alpha, f_after = line_minimize(lambda a: loss_at(state.theta - a * x), gamma0)
        beta = 0.0
        if not np.isfinite(f_after) or f_after >= f_before:
            alpha = line_search_backtracking(loss_at, state.theta, x, g, gamma0)
            if alpha == 0.0:
                return reject()
            f_after = loss_at(state.theta - alpha * x)
    else:
        def phi(a: float, b: float) -> float:
            return loss_at(state.theta - a * x - b * d_prev)

        simplex = [(gamma0, 0.0), (2.0 * gamma0, 0.0), (gamma0, 0.5)]
        (alpha, beta), f_after, finite_evals = nelder_mead_2d(phi, simplex)
        if finite_evals == 0 or not np.isfinite(f_after) or f_after >= f_before:
            return reject()

    theta_new = state.theta - alpha * x - beta * d_prev
    d_new = ncg_direction_update(x, d_prev, alpha, beta)
    predicted = alpha * dot(g, x) + beta * dot(g, d_prev)
    rho, lam_after = _rho_and_lambda(state.lam, f_before, f_after, predicted)
    new_state = NcgState(
        theta_new,
        lam_after,
        d_new,
        res.x,
        steps_since_reset=0 if forced_reset else counter,
        reset_period=state.reset_period,
        last_alpha=alpha,
        last_beta=beta,
    )
    report = StepReport(
        f_before, f_after, predicted, rho, res, lam_after, True, alpha, grad_norm
    )
    return new_state, report
