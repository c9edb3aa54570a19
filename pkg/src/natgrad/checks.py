"""Randomized self-check suites with printed per-case reports.

Each suite pits an analytic code path against an independent oracle:
finite differences for gradients and directional derivatives, the dense
metric for the matrix-free product, a direct dense solve for CG, and
Monte-Carlo statistics for the score. The CLI exposes them as
``natgrad check <suite>``; the test suite calls them directly.
"""

from __future__ import annotations

import numpy as np

from .core import Matrix, MatrixOperator, ParamVector, make_rng
from .metric import (
    MetricOperator,
    OutputModel,
    explicit_fisher,
    gn_vec_preactivation,
    linear_gaussian,
    score_mean,
    sigmoid_bernoulli,
    softmax_multinomial,
)
from .model import Batch, Mlp, forward, gradient, init_mlp, loss, rop_output
from .solver import SolverConfig, Termination, cg_solve

OUTPUT_MODELS = {
    "linear_gaussian": linear_gaussian,
    "sigmoid_bernoulli": sigmoid_bernoulli,
    "softmax_multinomial": softmax_multinomial,
}

_OUT_ACT = {
    "linear_gaussian": "linear",
    "sigmoid_bernoulli": "sigmoid",
    "softmax_multinomial": "softmax",
}


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(np.atleast_1d(want))), 1e-300)
    return float(np.linalg.norm(np.atleast_1d(got) - np.atleast_1d(want))) / scale


def random_tiny_net(
    rng: np.random.Generator, kind: str, max_hidden: int = 5, n: int = 6
) -> tuple[Mlp, Matrix, Batch, OutputModel]:
    """A small random model/batch pair for one output family."""
    d = int(rng.integers(2, 5))
    h = int(rng.integers(3, max_hidden + 1))
    o = int(rng.integers(2, 4))
    hidden_act = str(rng.choice(["sigmoid", "tanh"]))
    m = init_mlp([d, h, o], [hidden_act, _OUT_ACT[kind]], seed=int(rng.integers(1 << 30)))
    theta = m.flatten() + 0.3 * rng.standard_normal(m.param_count)
    m = m.with_params(theta)
    x = rng.standard_normal((n, d))
    y = forward(m, x).outputs
    if kind == "linear_gaussian":
        t = y + rng.standard_normal(y.shape)
    elif kind == "sigmoid_bernoulli":
        t = (rng.random(y.shape) < 0.5).astype(float)
    else:
        t = np.zeros_like(y)
        t[np.arange(n), rng.integers(0, o, size=n)] = 1.0
    om = OUTPUT_MODELS[kind]()
    return m, x, Batch(x, t), om


def fd_gradient(m: Mlp, batch: Batch, om: OutputModel, eps: float = 1e-5) -> ParamVector:
    """Central finite differences of the loss, coordinate by coordinate."""
    theta = m.flatten()
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = eps
        f_plus = loss(m.with_params(theta + e), batch, om)
        f_minus = loss(m.with_params(theta - e), batch, om)
        g[j] = (f_plus - f_minus) / (2.0 * eps)
    return g


def fd_output_jvp(m: Mlp, x: Matrix, v: ParamVector, eps: float = 1e-5) -> Matrix:
    """Central finite differences of the outputs along the tangent v."""
    theta = m.flatten()
    y_plus = forward(m.with_params(theta + eps * v), x).outputs
    y_minus = forward(m.with_params(theta - eps * v), x).outputs
    return (y_plus - y_minus) / (2.0 * eps)


def _report(name: str, case: int, err: float, tol: float) -> bool:
    ok = err <= tol
    print(f"  [{'ok' if ok else 'FAIL'}] {name} case {case:2d}: error {err:.3e} (tol {tol:.1e})")
    return ok


def check_grad(seed: int = 0, cases: int = 20, tol: float = 1e-6) -> bool:
    """Reverse-mode gradient against central finite differences."""
    rng = make_rng(seed, 101)
    ok = True
    for c in range(cases):
        kind = list(OUTPUT_MODELS)[c % 3]
        m, _, batch, om = random_tiny_net(rng, kind)
        err = float(np.max(np.abs(gradient(m, batch, om) - fd_gradient(m, batch, om))))
        ok &= _report("grad-vs-fd", c, err, tol)
    return ok


def check_rop(seed: int = 0, cases: int = 20, tol: float = 1e-6) -> bool:
    """Forward-mode output tangent against central finite differences."""
    rng = make_rng(seed, 102)
    ok = True
    for c in range(cases):
        kind = list(OUTPUT_MODELS)[c % 3]
        m, x, _, _ = random_tiny_net(rng, kind)
        v = rng.standard_normal(m.param_count)
        err = float(np.max(np.abs(rop_output(m, x, v) - fd_output_jvp(m, x, v))))
        ok &= _report("rop-vs-fd", c, err, tol)
    return ok


def check_fisher(seed: int = 0, cases: int = 20, tol: float = 1e-8) -> bool:
    """Matrix-free metric products against the dense metric, plus positive
    semi-definiteness of the dense matrix."""
    rng = make_rng(seed, 103)
    ok = True
    for c in range(cases):
        kind = list(OUTPUT_MODELS)[c % 3]
        m, x, _, om = random_tiny_net(rng, kind)
        dense = explicit_fisher(m, x, om)
        op = MetricOperator(m, x, om, damping=0.0)
        v = rng.standard_normal(m.param_count)
        err = relative_error(op.apply(v), dense @ v)
        ok &= _report("metric-vs-dense", c, err, tol)
        min_eig = float(np.linalg.eigvalsh(dense).min())
        ok &= _report("dense-psd", c, max(0.0, -min_eig), 1e-10)
    return ok


def check_gn_equiv(seed: int = 0, cases: int = 20, tol: float = 1e-9) -> bool:
    """The metric product equals the pre-activation curvature product for
    every matching output/loss pair."""
    rng = make_rng(seed, 104)
    ok = True
    for c in range(cases):
        for kind in OUTPUT_MODELS:
            m, x, _, om = random_tiny_net(rng, kind)
            v = rng.standard_normal(m.param_count)
            a = MetricOperator(m, x, om, damping=0.0).apply(v)
            b = gn_vec_preactivation(m, x, om, v)
            ok &= _report(f"gn-equiv-{kind}", c, relative_error(a, b), tol)
    return ok


def random_spd(rng: np.random.Generator, n: int, eig_low: float = 0.5, eig_high: float = 5.0) -> Matrix:
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = rng.uniform(eig_low, eig_high, size=n)
    return (q * eigs) @ q.T


def check_cg(seed: int = 0, cases: int = 10, tol: float = 1e-8) -> bool:
    """CG against a dense direct solve, plus finite termination."""
    rng = make_rng(seed, 105)
    ok = True
    n = 30
    for c in range(cases):
        a = random_spd(rng, n)
        b = rng.standard_normal(n)
        want = np.linalg.solve(a, b)
        res = cg_solve(MatrixOperator(a), b, np.zeros(n), SolverConfig(60, 1e-10, 0.6))
        ok &= _report("cg-vs-direct", c, relative_error(res.x, want), tol)
        res2 = cg_solve(MatrixOperator(a), b, np.zeros(n), SolverConfig(n + 2, 1e-12, 0.6))
        terminated = res2.termination is Termination.CONVERGED
        ok &= _report("cg-termination", c, 0.0 if terminated else 1.0, 0.5)
    return ok


def check_score_mean(seed: int = 0, n_samples: int = 100_000, sigma_tol: float = 4.0) -> bool:
    """The mean score under the model's own target distribution is zero."""
    rng = make_rng(seed, 106)
    ok = True
    for c, kind in enumerate(OUTPUT_MODELS):
        m, x, _, om = random_tiny_net(rng, kind, n=1)
        mean, stderr = score_mean(m, x, om, n_samples, seed=int(rng.integers(1 << 30)), with_stderr=True)
        worst = float(np.max(np.abs(mean) / np.maximum(stderr, 1e-300)))
        ok &= _report(f"score-mean-{kind}", c, worst, sigma_tol)
    return ok


SUITES = {
    "grad": check_grad,
    "rop": check_rop,
    "fisher": check_fisher,
    "gn-equiv": check_gn_equiv,
    "cg": check_cg,
    "score-mean": check_score_mean,
}
