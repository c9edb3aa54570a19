"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``. The directional
replications at the end dominate the runtime (the optimizer benchmark takes
several minutes); everything else finishes in well under two minutes.
"""

import time

import numpy as np

import natgrad as ng
from natgrad.checks import (
    check_cg,
    check_grad,
    check_rop,
    random_spd,
    random_tiny_net,
    relative_error,
)
from natgrad.cli import main
from natgrad.core import LinearOperator, make_rng
from natgrad.experiments import (
    RunConfig,
    bench_configs,
    build_bundle,
    metric_source_configs,
    resolve_config,
    robustness_protocol,
    run_training,
)
from natgrad.metric import MetricOperator
from natgrad.model import Batch, forward, init_mlp
from natgrad.optim import ncg_direction_update
from natgrad.solver import SolverConfig

from helpers import expected_hessian_mc_fd

KINDS = ("linear_gaussian", "sigmoid_bernoulli", "softmax_multinomial")


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def shared_instances(cases=20):
    """20 random nets (at most 60 parameters) per output family."""
    rng = make_rng(2024, 1)
    out = []
    for c in range(cases):
        for kind in KINDS:
            m, x, batch, om = random_tiny_net(rng, kind, n=5)
            assert m.param_count <= 60
            v = rng.standard_normal(m.param_count)
            out.append((m, x, om, v))
    return out


def test_c01_fisher_equals_gauss_newton():
    t0 = time.perf_counter()
    worst = 0.0
    for m, x, om, v in shared_instances():
        a = MetricOperator(m, x, om, damping=0.0).apply(v)
        b = ng.gn_vec_preactivation(m, x, om, v)
        worst = max(worst, relative_error(a, b))
    elapsed = time.perf_counter() - t0
    report(
        "fisher == extended gauss-newton",
        worst <= 1e-9 and elapsed < 10.0,
        f"max rel err {worst:.2e} (tol 1e-9), {elapsed:.1f}s (< 10s)",
    )


def test_c02_matrix_free_matches_dense_oracle():
    worst = 0.0
    for m, x, om, v in shared_instances():
        dense = ng.explicit_fisher(m, x, om)
        got = MetricOperator(m, x, om, damping=0.0).apply(v)
        worst = max(worst, relative_error(got, dense @ v))
    report(
        "matrix-free == dense oracle",
        worst <= 1e-8,
        f"max rel err {worst:.2e} (tol 1e-8)",
    )


def test_c03_fisher_equals_expected_hessian():
    t0 = time.perf_counter()
    m = init_mlp([2, 2, 2], ["sigmoid", "sigmoid"], seed=4)
    m = m.with_params(m.flatten() + 0.3 * make_rng(4, 0).standard_normal(m.param_count))
    x = make_rng(4, 1).standard_normal((2, 2))
    om = ng.sigmoid_bernoulli()
    dense = ng.explicit_fisher(m, x, om)
    mean, stderr = expected_hessian_mc_fd(m, x, om, n_samples=10_000, chunks=100, seed=11)
    # small absolute floor absorbs the finite-difference truncation error
    units = np.abs(mean - dense) / (5.0 * stderr + 1e-7)
    elapsed = time.perf_counter() - t0
    report(
        "fisher == expected hessian (MC + finite differences)",
        float(units.max()) <= 1.0 and elapsed < 60.0,
        f"worst entry {units.max():.2f} of the 5-stderr budget, {elapsed:.1f}s (< 60s)",
    )


def test_c04_score_mean_is_zero():
    rng = make_rng(31, 0)
    worst = 0.0
    for kind in KINDS:
        m, x, _, om = random_tiny_net(rng, kind, n=1)
        mean, stderr = ng.score_mean(
            m, x, om, 100_000, seed=int(rng.integers(1 << 30)), with_stderr=True
        )
        worst = max(worst, float(np.max(np.abs(mean) / np.maximum(stderr, 1e-300))))
    report(
        "score mean vanishes under the model distribution",
        worst <= 4.0,
        f"worst coordinate {worst:.2f} standard errors (tol 4)",
    )


def test_c05_derivative_suites():
    ok_grad = check_grad()
    ok_rop = check_rop()
    rng = make_rng(32, 0)
    worst = 0.0
    for c in range(50):
        m, x, _, _ = random_tiny_net(rng, KINDS[c % 3], n=4)
        v = rng.standard_normal(m.param_count)
        u = rng.standard_normal(forward(m, x).outputs.shape)
        lhs = ng.dot(ng.lop_output(m, x, u), v)
        rhs = float(np.sum(u * ng.rop_output(m, x, v)))
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(rhs)))
    report(
        "gradient & rop finite-difference suites + adjoint identity",
        ok_grad and ok_rop and worst <= 1e-10,
        f"fd suites {'ok' if ok_grad and ok_rop else 'FAILED'}, "
        f"adjoint worst {worst:.2e} (tol 1e-10)",
    )


def test_c06_cg_against_direct_solve():
    ok = check_cg()
    report("cg == direct solve, finite termination", ok, "30x30 spd systems, tol 1e-8, n+2 iters")


class _Reparametrized(LinearOperator):
    """Metric of the model under theta = M phi, i.e. Mᵀ G M + damping."""

    def __init__(self, inner, m, damping):
        self.inner, self.m, self.damping, self.dim = inner, m, damping, inner.dim

    def apply(self, v):
        return self.m.T @ self.inner.apply(self.m @ v) + self.damping * v


def test_c07_reparametrization_covariance():
    rng = make_rng(3, 1)
    m = init_mlp([2, 3, 2], ["tanh", "sigmoid"], seed=11)
    m = m.with_params(m.flatten() + 0.3 * rng.standard_normal(m.param_count))
    om = ng.sigmoid_bernoulli()
    n, p = 40, m.param_count
    x = rng.standard_normal((n, 2))
    t = (rng.random((n, 2)) < 0.5).astype(float)
    batch = Batch(x, t)
    probe = rng.standard_normal((5, 2))
    gamma, lam = 0.5, 1e-10
    cfg = SolverConfig(2000, 1e-13, 0.6)

    theta = m.flatten()
    g = ng.gradient(m, batch, om)
    res = ng.cg_solve(MetricOperator(m, x, om, lam), g, np.zeros(p), cfg)
    pred_base = forward(m.with_params(theta - gamma * res.x), probe).outputs

    mat = np.eye(p) + 0.3 * rng.standard_normal((p, p)) / np.sqrt(p)
    phi = np.linalg.solve(mat, theta)
    m_phi = m.with_params(mat @ phi)
    g_phi = mat.T @ ng.gradient(m_phi, batch, om)
    op_phi = _Reparametrized(MetricOperator(m_phi, x, om, 0.0), mat, lam)
    res_phi = ng.cg_solve(op_phi, g_phi, np.zeros(p), cfg)
    pred_re = forward(m.with_params(mat @ (phi - gamma * res_phi.x)), probe).outputs

    err = relative_error(pred_re, pred_base)
    report(
        "natural step is covariant under linear reparametrization",
        err <= 1e-6,
        f"probe prediction rel err {err:.2e} (tol 1e-6)",
    )


def test_c08_ncg_conjugacy():
    worst = 0.0
    for trial in range(5):
        rng = make_rng(13, 830, trial)
        p = 6
        hess = random_spd(rng, p, 0.5, 4.0)
        b = rng.standard_normal(p)
        w = rng.standard_normal(p)

        def grad(w):
            return hess @ w - b

        x1 = grad(w)
        w = w - ((grad(w) @ x1) / (x1 @ hess @ x1)) * x1
        d_prev = x1
        for _ in range(3):
            g = grad(w)
            x = g  # Euclidean metric: the natural direction is the gradient
            m2 = np.array(
                [[x @ hess @ x, x @ hess @ d_prev], [d_prev @ hess @ x, d_prev @ hess @ d_prev]]
            )
            alpha, beta = np.linalg.solve(m2, np.array([g @ x, g @ d_prev]))
            d_new = ncg_direction_update(x, d_prev, alpha, beta)
            bound = np.sqrt((d_new @ hess @ d_new) * (d_prev @ hess @ d_prev))
            worst = max(worst, abs(d_new @ hess @ d_prev) / bound)
            w = w - alpha * x - beta * d_prev
            d_prev = d_new
    report(
        "joint 2-D minimization yields conjugate directions",
        worst <= 1e-8,
        f"worst normalized conjugacy defect {worst:.2e} (tol 1e-8)",
    )


def test_c09_benchmark_direction():
    t0 = time.perf_counter()
    sgd_final, ngd_final, crossings = [], [], []
    for seed in range(5):
        cfg = resolve_config(
            RunConfig(
                dataset_kind="autoencoder",
                dataset_n=1000,
                dataset_seed=seed,
                model_init_seed=seed + 100,
                run_steps=200,
                run_eval_every=50,
                run_seed=seed,
            )
        )
        bundle = build_bundle(cfg)
        confs = bench_configs(cfg)
        sgd = run_training(confs["sgd"], bundle)
        ngd = run_training(confs["ngd"], bundle)
        ncg = run_training(confs["ncg"], bundle, stop_below=ngd[-1].train_loss)
        sgd_final.append(sgd[-1].train_loss)
        ngd_final.append(ngd[-1].train_loss)
        crossed = ncg[-1].train_loss <= ngd[-1].train_loss
        crossings.append(ncg[-1].step if crossed else np.inf)
    elapsed = time.perf_counter() - t0
    med_sgd = float(np.median(sgd_final))
    med_ngd = float(np.median(ngd_final))
    med_cross = float(np.median(crossings))
    ok = med_ngd < med_sgd and med_cross < 200 and elapsed < 600
    report(
        "benchmark: ngd beats sgd at 200 updates, ncg needs fewer updates",
        ok,
        f"median train loss sgd {med_sgd:.3f} vs ngd {med_ngd:.3f}; "
        f"median ncg crossing step {med_cross:.0f} (< 200); {elapsed:.0f}s (< 600s)",
    )


def test_c10_metric_source_direction():
    finals = {"same": [], "disjoint": [], "unlabeled": []}
    for seed in range(5):
        cfg = RunConfig(
            dataset_kind="classification",
            dataset_seed=seed,
            dataset_n=2000,
            dataset_d=20,
            dataset_k=4,
            dataset_sep=2.5,
            model_dims=(20, 64, 4),
            model_acts=("sigmoid", "softmax"),
            model_init_seed=seed + 50,
            run_steps=300,
            run_eval_every=25,
            run_seed=seed,
        )
        confs = metric_source_configs(cfg)
        bundle = build_bundle(confs["same"])
        for name, c in confs.items():
            records = run_training(c, bundle)
            finals[name].append(records[-1].valid_loss)
    med = {name: float(np.median(v)) for name, v in finals.items()}
    ok = med["disjoint"] <= med["same"] and med["unlabeled"] <= med["disjoint"]
    report(
        "metric batch source: disjoint <= same, unlabeled <= disjoint (held-out)",
        ok,
        f"median held-out loss same {med['same']:.3f}, disjoint {med['disjoint']:.3f}, "
        f"unlabeled {med['unlabeled']:.3f}",
    )


def test_c11_robustness_direction():
    t0 = time.perf_counter()
    below_counts, err_gaps = [], []
    for seed in range(3):
        cfg = RunConfig(dataset_seed=seed, model_init_seed=seed + 7, run_seed=seed)
        sgd_curve, ngd_curve = robustness_protocol(cfg)
        err_gaps.append(abs(sgd_curve.valid_error - ngd_curve.valid_error))
        below_counts.append(int(np.sum(ngd_curve.variances < sgd_curve.variances)))
    elapsed = time.perf_counter() - t0
    matched = max(err_gaps) <= 0.01
    med_below = float(np.median(below_counts))
    ok = matched and med_below >= 8 and elapsed < 1800
    report(
        "robustness: ngd output variance below sgd on >= 8 of 10 segments",
        ok,
        f"validation errors matched within {max(err_gaps):.3f} (tol 0.01); "
        f"segments below per seed {below_counts} (median {med_below:.0f} >= 8); "
        f"{elapsed:.0f}s (< 1800s)",
    )


def test_c12_determinism(tmp_path):
    cfg_text = "\n".join(
        [
            "dataset.kind = classification",
            "dataset.n = 300",
            "dataset.d = 6",
            "dataset.k = 3",
            "model.dims = 6-8-3",
            "model.acts = sigmoid,softmax",
            "optimizer.kind = ngd",
            "optimizer.lr = 0.2",
            "optimizer.batch = 64",
            "metric.batch_size = 64",
            "run.steps = 8",
            "run.eval_every = 2",
        ]
    )
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(cfg_text + "\n")

    def run_to(out):
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        rows = (out / "log.csv").read_text().strip().split("\n")
        stripped = []
        for row in rows[1:]:
            cells = row.split(",")
            del cells[1]  # wall_ms
            stripped.append(",".join(cells))
        return stripped

    a = run_to(tmp_path / "a")
    b = run_to(tmp_path / "b")
    report(
        "rerun determinism: identical csv modulo wall_ms",
        a == b,
        f"{len(a)} rows byte-identical",
    )
