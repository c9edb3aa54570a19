"""Synthetic desk-scale datasets, the training loop, and the three
experimental protocols (optimizer benchmark, metric-batch source comparison,
robustness to reordering of the training stream), all logging to CSV.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import Matrix, NumericError, ParamVector, make_rng, norm2
from .metric import OutputModel, linear_gaussian, sigmoid_bernoulli, softmax_multinomial
from .model import Batch, Mlp, forward, gradient, init_mlp, loss
from .optim import (
    NcgState,
    NgdState,
    fresh_ncg_state,
    fresh_ngd_state,
    ncg_step,
    ngd_step,
    sgd_step,
)
from .solver import SolverConfig

CSV_HEADER = "step,wall_ms,train_loss,valid_loss,cg_iters,cg_residual,rho,lambda,grad_norm"
VARIANCE_HEADER = "segment,optimizer,mean_variance"


def worker_count() -> int:
    """Worker cap from NATGRAD_THREADS; defaults to 1 (fully sequential)."""
    try:
        return max(1, int(os.environ.get("NATGRAD_THREADS", "1")))
    except ValueError:
        return 1


def _map_runs(fn, items):
    threads = worker_count()
    if threads == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one training run."""

    dataset_kind: str = "classification"  # autoencoder | classification
    dataset_seed: int = 0
    dataset_n: int = 1000
    dataset_d: int = 16
    dataset_k: int = 5
    dataset_sep: float = 3.0
    model_dims: tuple[int, ...] | None = None  # None -> dataset default
    model_acts: tuple[str, ...] | None = None
    model_init_seed: int = 1
    opt_kind: str = "ngd"  # sgd | ngd | ncg
    opt_lr: float = 0.3
    opt_lambda0: float = 1.0
    opt_lambda_fixed: bool = False
    opt_reset_period: int = 30
    opt_line_search: bool = False
    opt_batch: int = 256
    solver_max_iters: int = 20
    solver_rtol: float = 1e-4
    solver_warm_scale: float = 0.6
    metric_source: str = "same"  # same | disjoint | unlabeled
    metric_batch_size: int = 384
    metric_beta: float = 1.0
    run_steps: int = 100
    run_eval_every: int = 10
    run_out_dir: str = "runs/out"
    run_seed: int = 0


def default_dims(cfg: RunConfig) -> tuple[int, ...]:
    if cfg.dataset_kind == "autoencoder":
        return (64, 32, 16, 8, 16, 32, 64)
    return (cfg.dataset_d, 32, cfg.dataset_k)


def default_acts(cfg: RunConfig, dims: tuple[int, ...]) -> tuple[str, ...]:
    hidden = ["sigmoid"] * (len(dims) - 2)
    out = "sigmoid" if cfg.dataset_kind == "autoencoder" else "softmax"
    return tuple(hidden + [out])


def resolve_config(cfg: RunConfig) -> RunConfig:
    """Fill dataset-dependent defaults so the config is self-contained."""
    dims = cfg.model_dims or default_dims(cfg)
    acts = cfg.model_acts or default_acts(cfg, dims)
    if len(acts) != len(dims) - 1:
        raise ValueError(f"{len(dims) - 1} layers but {len(acts)} activations")
    return replace(cfg, model_dims=tuple(dims), model_acts=tuple(acts))


def output_model_for(cfg: RunConfig) -> OutputModel:
    act = (cfg.model_acts or default_acts(cfg, cfg.model_dims or default_dims(cfg)))[-1]
    if act == "linear":
        return linear_gaussian(cfg.metric_beta)
    if act == "sigmoid":
        return sigmoid_bernoulli()
    if act == "softmax":
        return softmax_multinomial()
    raise ValueError(f"no output model for final activation {act!r}")


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetBundle:
    train: Batch
    valid: Batch
    test: Batch
    unlabeled: Matrix  # inputs only, never paired with targets
    seed: int


def _stroke_images(rng: np.random.Generator, count: int) -> Matrix:
    """8x8 grayscale renderings of randomly parametrized sinusoid strokes."""
    side = 8
    px, py = np.meshgrid(np.linspace(0.0, 1.0, side), np.linspace(0.0, 1.0, side))
    px = px.ravel()[None, :]
    py = py.ravel()[None, :]
    freq = rng.uniform(0.5, 2.5, size=(count, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(count, 1))
    amp = rng.uniform(0.10, 0.35, size=(count, 1))
    center = rng.uniform(0.30, 0.70, size=(count, 1))
    angle = rng.uniform(0.0, np.pi, size=(count, 1))
    width = rng.uniform(0.06, 0.14, size=(count, 1))
    cu, su = np.cos(angle), np.sin(angle)
    u = cu * (px - 0.5) - su * (py - 0.5) + 0.5
    v = su * (px - 0.5) + cu * (py - 0.5) + 0.5
    curve = center + amp * np.sin(2.0 * np.pi * freq * u + phase)
    img = np.exp(-((v - curve) ** 2) / (2.0 * width**2))
    return img


def gen_autoencoder_task(seed: int, n: int) -> DatasetBundle:
    """Reconstruction task: sinusoid-stroke images, targets == inputs."""
    if n < 200:
        raise ValueError("need at least 200 training examples")
    rng = make_rng(seed, 1)
    train = _stroke_images(rng, n)
    valid = _stroke_images(rng, 200)
    test = _stroke_images(rng, 200)
    unlabeled = _stroke_images(rng, n)
    return DatasetBundle(
        Batch(train, train.copy()),
        Batch(valid, valid.copy()),
        Batch(test, test.copy()),
        unlabeled,
        seed,
    )


def sample_gaussian_mixture(
    rng: np.random.Generator, count: int, d: int, k: int, sep: float
) -> tuple[Matrix, Matrix]:
    """Unit-covariance clusters at distance ``sep`` from the origin, one-hot
    labels."""
    dirs = rng.standard_normal((k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = sep * dirs
    labels = rng.integers(0, k, size=count)
    x = means[labels] + rng.standard_normal((count, d))
    t = np.zeros((count, k))
    t[np.arange(count), labels] = 1.0
    return x, t


def _mixture_split(
    rng: np.random.Generator,
    means: Matrix,
    count: int,
    tail_prob: float = 0.0,
    tail_scale: float = 1.0,
) -> tuple[Matrix, Matrix]:
    """One draw per row from the class mixture. With tail_prob > 0 each
    class is itself a two-component Gaussian scale mixture: a fraction of
    points sits tail_scale times farther out (heavy-tailed inputs)."""
    k, d = means.shape
    labels = rng.integers(0, k, size=count)
    x = means[labels] + rng.standard_normal((count, d))
    if tail_prob > 0.0:
        scales = np.where(rng.random(count) < tail_prob, tail_scale, 1.0)
        x = x * scales[:, None]
    t = np.zeros((count, k))
    t[np.arange(count), labels] = 1.0
    return x, t


def mixture_means(seed: int, d: int, k: int, sep: float) -> Matrix:
    rng = make_rng(seed, 2)
    dirs = rng.standard_normal((k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return sep * dirs


def gen_classification_task(
    seed: int, n: int, d: int, k: int, sep: float = 3.0
) -> DatasetBundle:
    """Gaussian-mixture classification with an equal-size unlabeled pool."""
    if k < 2:
        raise ValueError("need at least 2 classes")
    means = mixture_means(seed, d, k, sep)
    rng = make_rng(seed, 3)
    n_eval = max(200, n // 5)
    train = _mixture_split(rng, means, n)
    valid = _mixture_split(rng, means, n_eval)
    test = _mixture_split(rng, means, n_eval)
    unlabeled = _mixture_split(rng, means, n)[0]
    return DatasetBundle(Batch(*train), Batch(*valid), Batch(*test), unlabeled, seed)


def build_bundle(cfg: RunConfig) -> DatasetBundle:
    if cfg.dataset_kind == "autoencoder":
        return gen_autoencoder_task(cfg.dataset_seed, cfg.dataset_n)
    if cfg.dataset_kind == "classification":
        return gen_classification_task(
            cfg.dataset_seed, cfg.dataset_n, cfg.dataset_d, cfg.dataset_k, cfg.dataset_sep
        )
    raise ValueError(f"unknown dataset kind {cfg.dataset_kind!r}")


def misclassification(m: Mlp, batch: Batch) -> float:
    y = forward(m, batch.inputs).outputs
    return float(np.mean(np.argmax(y, axis=1) != np.argmax(batch.targets, axis=1)))


# ---------------------------------------------------------------------------
# Training loop and CSV logging


@dataclass
class TrainRecord:
    step: int
    wall_ms: int
    train_loss: float
    valid_loss: float
    cg_iters: int
    cg_residual: float
    rho: float
    lam: float
    grad_norm: float

    def to_csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                str(self.wall_ms),
                repr(self.train_loss),
                repr(self.valid_loss),
                str(self.cg_iters),
                repr(self.cg_residual),
                repr(self.rho),
                repr(self.lam),
                repr(self.grad_norm),
            ]
        )

    @classmethod
    def from_csv_row(cls, row: str) -> "TrainRecord":
        f = row.split(",")
        return cls(
            int(f[0]), int(f[1]), float(f[2]), float(f[3]), int(f[4]),
            float(f[5]), float(f[6]), float(f[7]), float(f[8]),
        )


def read_log(path) -> list[TrainRecord]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path} does not carry the training-log schema")
    return [TrainRecord.from_csv_row(row) for row in lines[1:] if row]


class TrainingAborted(NumericError):
    """A run hit a non-recoverable numeric failure; partial records kept."""

    def __init__(self, message: str, records: list[TrainRecord]):
        super().__init__(message)
        self.records = records


def _metric_inputs(
    source: str,
    bundle: DatasetBundle,
    batch_idx: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> Matrix:
    x = bundle.train.inputs
    if source == "same":
        return x[batch_idx]
    if source == "disjoint":
        pool = np.setdiff1d(np.arange(x.shape[0]), batch_idx)
        if pool.size < size:
            raise ValueError(
                f"cannot draw a disjoint metric batch of {size} from "
                f"{pool.size} remaining training rows"
            )
        return x[rng.choice(pool, size=size, replace=False)]
    if source == "unlabeled":
        pool_n = bundle.unlabeled.shape[0]
        return bundle.unlabeled[rng.choice(pool_n, size=min(size, pool_n), replace=False)]
    raise ValueError(f"unknown metric source {source!r}")


def run_training(
    cfg: RunConfig,
    bundle: DatasetBundle | None = None,
    log_path=None,
    step_callback=None,
    stop_below: float | None = None,
) -> list[TrainRecord]:
    """Run one configured training loop, appending one CSV row per step.

    Deterministic given the config: reruns produce identical logs except for
    the wall_ms column. ``stop_below`` ends the run early once the full
    training loss drops under the given value.
    """
    cfg = resolve_config(cfg)
    if bundle is None:
        bundle = build_bundle(cfg)
    om = output_model_for(cfg)
    model = init_mlp(list(cfg.model_dims), list(cfg.model_acts), cfg.model_init_seed)
    solver_cfg = SolverConfig(cfg.solver_max_iters, cfg.solver_rtol, cfg.solver_warm_scale)
    batch_rng = make_rng(cfg.run_seed, 11)
    metric_rng = make_rng(cfg.run_seed, 13)

    if cfg.opt_kind == "ngd":
        state: NgdState | NcgState | None = fresh_ngd_state(
            model, cfg.opt_lambda0, cfg.opt_lr, cfg.opt_line_search
        )
    elif cfg.opt_kind == "ncg":
        state = fresh_ncg_state(model, cfg.opt_lambda0, cfg.opt_reset_period)
    elif cfg.opt_kind == "sgd":
        state = None
        theta = model.flatten()
    else:
        raise ValueError(f"unknown optimizer {cfg.opt_kind!r}")

    n_train = bundle.train.size
    batch_size = min(cfg.opt_batch, n_train)
    records: list[TrainRecord] = []
    out = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        out = open(log_path, "w", encoding="utf-8", newline="\n")
        out.write(CSV_HEADER + "\n")
    t0 = time.perf_counter()
    valid_loss = np.nan
    try:
        for step in range(1, cfg.run_steps + 1):
            idx = batch_rng.choice(n_train, size=batch_size, replace=False)
            grad_batch = Batch(bundle.train.inputs[idx], bundle.train.targets[idx])
            if cfg.opt_kind == "sgd":
                g = gradient(model.with_params(theta), grad_batch, om)
                theta = theta - cfg.opt_lr * g
                if not np.all(np.isfinite(theta)):
                    raise TrainingAborted(f"parameters diverged at step {step}", records)
                cg_iters, cg_residual, rho, lam = 0, 0.0, 0.0, 0.0
                grad_norm = norm2(g)
                report = None
            else:
                metric_x = _metric_inputs(
                    cfg.metric_source, bundle, idx, cfg.metric_batch_size, metric_rng
                )
                if cfg.opt_kind == "ngd":
                    state, report = ngd_step(model, state, grad_batch, metric_x, om, solver_cfg)
                else:
                    state, report = ncg_step(model, state, grad_batch, metric_x, om, solver_cfg)
                if cfg.opt_lambda_fixed:
                    state = replace(state, lam=cfg.opt_lambda0)
                theta = state.theta
                lam = state.lam
                cg_iters = report.cg.iterations
                cg_residual = report.cg.residual_norm
                rho = report.rho
                grad_norm = report.grad_norm
            m_now = model.with_params(theta)
            train_loss = loss(m_now, bundle.train, om)
            if step == 1 or step % cfg.run_eval_every == 0:
                valid_loss = loss(m_now, bundle.valid, om)
            if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
                raise TrainingAborted(f"non-finite loss at step {step}", records)
            wall_ms = int((time.perf_counter() - t0) * 1000)
            rec = TrainRecord(
                step, wall_ms, train_loss, valid_loss, cg_iters, cg_residual,
                rho, lam, grad_norm,
            )
            records.append(rec)
            if out is not None:
                out.write(rec.to_csv_row() + "\n")
                out.flush()
            if step_callback is not None:
                step_callback(step, theta, report)
            if stop_below is not None and train_loss <= stop_below:
                break
    finally:
        if out is not None:
            out.close()
    return records


# ---------------------------------------------------------------------------
# Benchmark (three-optimizer comparison on the reconstruction task)


def bench_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    """Per-optimizer configurations for the benchmark comparison."""
    base = resolve_config(replace(cfg, dataset_kind="autoencoder"))
    n = base.dataset_n
    sgd = replace(base, opt_kind="sgd", opt_lr=1.0, opt_batch=100)
    ngd = replace(
        base,
        opt_kind="ngd",
        opt_lr=0.3,
        opt_lambda0=1.0,
        opt_batch=min(1000, n),
        metric_source="same",
        metric_batch_size=min(1000, n),
    )
    ncg = replace(
        base,
        opt_kind="ncg",
        opt_lambda0=1.0,
        opt_reset_period=30,
        opt_batch=min(1000, n),
        metric_source="same",
        metric_batch_size=min(1000, n),
    )
    return {"sgd": sgd, "ngd": ngd, "ncg": ncg}


def bench_experiment(cfg: RunConfig, out_dir) -> dict[str, list[TrainRecord]]:
    """Train the same model with sgd/ngd/ncg and log one CSV per optimizer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = bench_configs(cfg)
    bundle = build_bundle(resolve_config(replace(cfg, dataset_kind="autoencoder")))
    logs = {}
    for name, c in configs.items():
        logs[name] = run_training(c, bundle, out_dir / f"{name}.csv")
    return logs


# ---------------------------------------------------------------------------
# Metric-batch source comparison


METRIC_SOURCES = ("same", "disjoint", "unlabeled")
METRIC_SOURCE_FILES = {
    "same": "same_batch.csv",
    "disjoint": "disjoint_batch.csv",
    "unlabeled": "unlabeled.csv",
}


def metric_source_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    """Three runs differing only in where the metric batch comes from."""
    base = resolve_config(replace(cfg, dataset_kind="classification"))
    base = replace(
        base,
        opt_kind="ngd",
        opt_lr=0.2,
        opt_lambda0=5.0,
        opt_line_search=False,
        solver_max_iters=50,
    )
    same = replace(base, metric_source="same", opt_batch=256, metric_batch_size=256)
    disjoint = replace(base, metric_source="disjoint", opt_batch=256, metric_batch_size=384)
    unlabeled = replace(base, metric_source="unlabeled", opt_batch=256, metric_batch_size=384)
    return {"same": same, "disjoint": disjoint, "unlabeled": unlabeled}


def metric_source_experiment(cfg: RunConfig, out_dir) -> dict[str, list[TrainRecord]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = metric_source_configs(cfg)
    bundle = build_bundle(next(iter(configs.values())))

    def one(item):
        name, c = item
        return name, run_training(c, bundle, out_dir / METRIC_SOURCE_FILES[name])

    return dict(_map_runs(one, list(configs.items())))


# ---------------------------------------------------------------------------
# Robustness to reordering of the training stream


@dataclass
class VarianceCurve:
    variances: np.ndarray  # one entry per resampled segment
    segment_size: int
    runs_per_segment: int
    optimizer: str
    valid_error: float  # mean misclassification over all runs

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.variances.shape != (10,):
            raise ValueError("expected exactly 10 per-segment variances")
        if np.any(self.variances < 0):
            raise ValueError("variances must be nonnegative")


def prediction_variance(models: list[Mlp], heldout: Batch) -> float:
    """Mean over held-out examples and output units of the across-model
    output variance."""
    dims = models[0].dims
    for m in models[1:]:
        if m.dims != dims or m.acts != models[0].acts:
            raise ValueError("models must share one architecture")
    outputs = np.stack([forward(m, heldout.inputs).outputs for m in models])
    # shifting by one model's outputs is exact for the variance and keeps
    # identical models at exactly zero
    outputs = outputs - outputs[0]
    return float(outputs.var(axis=0, ddof=0).mean())


def _train_online(
    model: Mlp,
    stream_x: Matrix,
    stream_t: Matrix,
    om: OutputModel,
    optimizer: str,
    lr: float,
    lam: float,
    batch: int,
    solver_cfg: SolverConfig,
) -> tuple[ParamVector, int]:
    """Single pass over the stream in order; every example used exactly once."""
    n = stream_x.shape[0]
    consumed = 0
    if optimizer == "sgd":
        theta = model.flatten()
        for start in range(0, n, batch):
            b = Batch(stream_x[start : start + batch], stream_t[start : start + batch])
            theta = sgd_step(theta, model, b, om, lr)
            consumed += b.size
        return theta, consumed
    state = fresh_ngd_state(model, lam, lr)
    for start in range(0, n, batch):
        b = Batch(stream_x[start : start + batch], stream_t[start : start + batch])
        state, _ = ngd_step(model, state, b, b.inputs, om, solver_cfg)
        state = replace(state, lam=lam)  # constant damping in this protocol
        consumed += b.size
    return state.theta, consumed


def robustness_protocol(
    cfg: RunConfig,
    stream_n: int = 20_000,
    segments: int = 10,
    heldout_n: int = 1_000,
    valid_n: int = 1_000,
    batch: int = 64,
    sgd_lr: float = 1.0,
    ngd_lr: float = 0.1,
    ngd_lambda: float = 0.3,
    tail_prob: float = 0.1,
    tail_scale: float = 4.0,
) -> tuple[VarianceCurve, VarianceCurve]:
    """Measure how much early training data influences the final model.

    The stream is split into two equal chunks; the first chunk into equal
    segments. For each segment, five runs train from scratch on the stream
    with only that segment resampled; the per-segment score is the mean
    variance of the trained models' outputs on held-out data. Both
    optimizers see identical streams and are tuned to land on matched
    validation error, so the variance difference reflects path stability,
    not speed. Heavy-tailed inputs (per-class scale mixture) make the
    function-space step size data-dependent for plain gradient steps, which
    is what the natural metric normalizes away.
    """
    if cfg.model_dims is None:
        cfg = replace(cfg, model_dims=(cfg.dataset_d, 50, cfg.dataset_k))
    cfg = resolve_config(replace(cfg, dataset_kind="classification"))
    d, k, sep = cfg.dataset_d, cfg.dataset_k, cfg.dataset_sep
    means = mixture_means(cfg.dataset_seed, d, k, sep)
    if stream_n % (2 * segments) != 0:
        raise ValueError("stream size must split into two chunks of whole segments")
    seg_size = stream_n // 2 // segments

    base_x, base_t = _mixture_split(
        make_rng(cfg.dataset_seed, 21), means, stream_n, tail_prob, tail_scale
    )
    heldout = Batch(
        *_mixture_split(make_rng(cfg.dataset_seed, 22), means, heldout_n, tail_prob, tail_scale)
    )
    valid = Batch(
        *_mixture_split(make_rng(cfg.dataset_seed, 23), means, valid_n, tail_prob, tail_scale)
    )
    model = init_mlp(list(cfg.model_dims), list(cfg.model_acts), cfg.model_init_seed)
    om = output_model_for(cfg)
    solver_cfg = SolverConfig(cfg.solver_max_iters, cfg.solver_rtol, cfg.solver_warm_scale)

    def run_one(task):
        optimizer, seg, run = task
        x = base_x.copy()
        t = base_t.copy()
        fresh_rng = make_rng(cfg.dataset_seed, 31, cfg.run_seed, seg, run)
        lo, hi = seg * seg_size, (seg + 1) * seg_size
        x[lo:hi], t[lo:hi] = _mixture_split(fresh_rng, means, seg_size, tail_prob, tail_scale)
        lr = sgd_lr if optimizer == "sgd" else ngd_lr
        theta, consumed = _train_online(
            model, x, t, om, optimizer, lr, ngd_lambda, batch, solver_cfg
        )
        if consumed != stream_n:
            raise RuntimeError(f"run consumed {consumed} of {stream_n} examples")
        trained = model.with_params(theta)
        return theta, misclassification(trained, valid)

    curves = {}
    for optimizer in ("sgd", "ngd"):
        tasks = [(optimizer, seg, run) for seg in range(segments) for run in range(5)]
        results = _map_runs(run_one, tasks)
        variances = np.zeros(segments)
        errors = []
        for seg in range(segments):
            trained = [model.with_params(results[seg * 5 + run][0]) for run in range(5)]
            variances[seg] = prediction_variance(trained, heldout)
            errors.extend(results[seg * 5 + run][1] for run in range(5))
        curves[optimizer] = VarianceCurve(
            variances, seg_size, 5, optimizer, float(np.mean(errors))
        )
    return curves["sgd"], curves["ngd"]


def write_variance_csv(path, curve: VarianceCurve) -> None:
    lines = [VARIANCE_HEADER]
    for seg, v in enumerate(curve.variances, start=1):
        lines.append(f"{seg},{curve.optimizer},{repr(float(v))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_variance_csv(path) -> tuple[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not lines or lines[0] != VARIANCE_HEADER:
        raise ValueError(f"{path} does not carry the variance schema")
    optimizer = None
    values = []
    for row in lines[1:]:
        seg, opt, v = row.split(",")
        optimizer = opt
        values.append(float(v))
    return optimizer, np.asarray(values)
