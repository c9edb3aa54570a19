"""The model-distribution metric as a matrix-free operator.

The metric-vector product composes the forward-mode and reverse-mode sweeps
with an analytic per-output weight: noise_std**2 for linear-Gaussian
outputs, 1/(y(1-y)) for sigmoid-Bernoulli, 1/y for softmax-multinomial.
``explicit_fisher`` and ``mc_fisher`` build the same matrix densely and by
Monte Carlo; both exist purely as oracles for tests at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, LinearOperator, Matrix, NumericError, ParamVector, make_rng
from .model import Batch, Mlp, forward, gradient, trace_derivs, _lop, _rop

WEIGHT_CLAMP = 1e-8
DESK_SCALE_LIMIT = 200

KINDS = ("linear_gaussian", "sigmoid_bernoulli", "softmax_multinomial")


@dataclass(frozen=True)
class OutputModel:
    """Density family on the targets: kind plus the Gaussian noise level."""

    kind: str
    noise_std: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown output model {self.kind!r}")
        if self.kind == "linear_gaussian" and not self.noise_std > 0:
            raise ValueError("noise_std must be positive for linear_gaussian")


def linear_gaussian(noise_std: float = 1.0) -> OutputModel:
    return OutputModel("linear_gaussian", noise_std)


def sigmoid_bernoulli() -> OutputModel:
    return OutputModel("sigmoid_bernoulli")


def softmax_multinomial() -> OutputModel:
    return OutputModel("softmax_multinomial")


def _output_weights(y: Matrix, om: OutputModel) -> Matrix:
    """Per-output metric weights evaluated at the current outputs."""
    if om.kind == "linear_gaussian":
        return np.full_like(y, om.noise_std**2)
    if om.kind == "sigmoid_bernoulli":
        return 1.0 / np.maximum(y * (1.0 - y), WEIGHT_CLAMP)
    return 1.0 / np.maximum(y, WEIGHT_CLAMP)


class MetricOperator(LinearOperator):
    """v -> (G + damping*I) v for a fixed model, input batch and damping.

    Only inputs are stored; the metric never sees targets. The forward
    trace is cached at construction, so repeated products during one CG
    solve reuse it.
    """

    def __init__(self, model: Mlp, inputs: Matrix, om: OutputModel, damping: float):
        if damping < 0:
            raise ValueError("damping must be >= 0")
        self.model = model
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.om = om
        self.damping = float(damping)
        self.dim = model.param_count
        self._trace = forward(model, self.inputs)
        self._derivs = trace_derivs(model, self._trace)
        weights = _output_weights(self._trace.outputs, om)
        if not np.all(np.isfinite(weights)):
            raise NumericError(f"{om.kind} metric weights are non-finite")
        self._weights = weights

    def apply(self, v: ParamVector) -> ParamVector:
        if v.shape != (self.dim,):
            raise DimensionError(f"operator dim {self.dim}, vector shape {v.shape}")
        n = self.inputs.shape[0]
        ry = _rop(self.model, self._trace, v, self._derivs)[1]
        gv = _lop(self.model, self._trace, self._weights * ry, "output", self._derivs) / n
        out = gv + self.damping * v
        if not np.all(np.isfinite(out)):
            raise NumericError(f"metric-vector product non-finite ({self.om.kind} weights)")
        return out


def metric_vec(op: MetricOperator, v: ParamVector) -> ParamVector:
    return op.apply(v)


def _check_desk_scale(m: Mlp) -> None:
    if m.param_count > DESK_SCALE_LIMIT:
        raise ValueError(
            f"{m.param_count} parameters; dense/MC oracles are capped at {DESK_SCALE_LIMIT}"
        )


def output_jacobians(m: Mlp, inputs: Matrix) -> np.ndarray:
    """Per-example output Jacobians, shape (n, o, P), built column by column."""
    _check_desk_scale(m)
    p = m.param_count
    trace = forward(m, inputs)
    cols = []
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        cols.append(_rop(m, trace, e)[1])
    return np.stack(cols, axis=2)


def explicit_fisher(m: Mlp, inputs: Matrix, om: OutputModel) -> Matrix:
    """Dense metric, exactly symmetric; test oracle for ``metric_vec``."""
    jac = output_jacobians(m, inputs)
    n = jac.shape[0]
    y = forward(m, inputs).outputs
    w = _output_weights(y, om)
    g = np.einsum("iop,io,ioq->pq", jac, w, jac) / n
    return 0.5 * (g + g.T)


def sample_targets(rng: np.random.Generator, y: Matrix, om: OutputModel) -> Matrix:
    """Draw one target row per output row from the model's own density."""
    if om.kind == "linear_gaussian":
        return y + om.noise_std * rng.standard_normal(y.shape)
    if om.kind == "sigmoid_bernoulli":
        return (rng.random(y.shape) < y).astype(np.float64)
    t = np.zeros_like(y)
    cum = np.cumsum(y, axis=1)
    u = rng.random(y.shape[0])
    idx = (u[:, None] > cum).sum(axis=1)
    t[np.arange(y.shape[0]), np.minimum(idx, y.shape[1] - 1)] = 1.0
    return t


def mc_fisher(
    m: Mlp,
    inputs: Matrix,
    om: OutputModel,
    n_samples: int,
    seed: int,
    with_stderr: bool = False,
):
    """Monte-Carlo metric from score outer products, targets drawn from the
    model itself. Scores go through ``gradient`` (reverse mode), keeping this
    estimator independent of the rop/lop pipeline it is used to check.
    """
    _check_desk_scale(m)
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    p = m.param_count
    rng = make_rng(seed)
    y = forward(m, inputs).outputs
    total = np.zeros((p, p))
    total_sq = np.zeros((p, p))
    for _ in range(n_samples):
        t = sample_targets(rng, y, om)
        acc = np.zeros((p, p))
        for i in range(n):
            score = -gradient(m, Batch(inputs[i : i + 1], t[i : i + 1]), om)
            acc += np.outer(score, score)
        acc /= n
        total += acc
        total_sq += acc * acc
    mean = total / n_samples
    if not with_stderr:
        return mean
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0)
    stderr = np.sqrt(var / n_samples)
    return mean, stderr


def gn_vec_preactivation(m: Mlp, inputs: Matrix, om: OutputModel, v: ParamVector) -> ParamVector:
    """Curvature-vector product through the output pre-activation: the mean
    over examples of J_rᵀ H J_r v, with H the loss Hessian in the
    pre-activation (identity/noise_std**2, diag(y(1-y)), or diag(y) - y yᵀ).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    trace = forward(m, inputs)
    rr = _rop(m, trace, v)[0]
    y = trace.outputs
    if om.kind == "linear_gaussian":
        u = rr / om.noise_std**2
    elif om.kind == "sigmoid_bernoulli":
        u = y * (1.0 - y) * rr
    else:
        u = y * rr - y * (y * rr).sum(axis=1, keepdims=True)
    return _lop(m, trace, u, "preactivation") / n


def score_mean(
    m: Mlp,
    inputs: Matrix,
    om: OutputModel,
    n_samples: int,
    seed: int,
    antithetic: bool = False,
    with_stderr: bool = False,
):
    """Monte-Carlo mean of the score (zero in expectation); test statistic.

    With ``antithetic=True`` (linear-Gaussian only) each draw is paired with
    its reflection about the mean, cancelling the score exactly up to
    rounding.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if antithetic and om.kind != "linear_gaussian":
        raise ValueError("antithetic pairing is defined for linear_gaussian only")
    rng = make_rng(seed)
    y = forward(m, inputs).outputs
    p = m.param_count
    total = np.zeros(p)
    total_sq = np.zeros(p)
    for _ in range(n_samples):
        if antithetic:
            noise = om.noise_std * rng.standard_normal(y.shape)
            s1 = -gradient(m, Batch(inputs, y + noise), om)
            s2 = -gradient(m, Batch(inputs, y - noise), om)
            s = 0.5 * (s1 + s2)
        else:
            t = sample_targets(rng, y, om)
            s = -gradient(m, Batch(inputs, t), om)
        total += s
        total_sq += s * s
    mean = total / n_samples
    if not with_stderr:
        return mean
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0)
    stderr = np.sqrt(var / n_samples)
    return mean, stderr
