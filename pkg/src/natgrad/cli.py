"""Command-line entry point: train / check / experiment.

Configs are flat ``key = value`` text files; unknown keys are rejected and
missing keys fall back to documented defaults. The fully resolved config is
echoed into the output directory so any run can be reproduced from its own
artifacts. Exit codes: 0 success, 1 bad configuration, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .checks import SUITES
from .experiments import (
    RunConfig,
    TrainingAborted,
    bench_experiment,
    build_bundle,
    metric_source_experiment,
    resolve_config,
    robustness_protocol,
    run_training,
    write_variance_csv,
)
from .model import init_mlp, save_mlp


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_dims(s: str) -> tuple[int, ...] | None:
    if s == "auto":
        return None
    return tuple(int(x) for x in s.split("-"))


def _parse_acts(s: str) -> tuple[str, ...] | None:
    if s == "auto":
        return None
    return tuple(s.split(","))


def _fmt_dims(v) -> str:
    return "auto" if v is None else "-".join(str(x) for x in v)


def _fmt_acts(v) -> str:
    return "auto" if v is None else ",".join(v)


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _fmt_float(v: float) -> str:
    return repr(float(v))


# key -> (RunConfig field, parse, format)
CONFIG_KEYS = {
    "dataset.kind": ("dataset_kind", str, str),
    "dataset.seed": ("dataset_seed", int, str),
    "dataset.n": ("dataset_n", int, str),
    "dataset.d": ("dataset_d", int, str),
    "dataset.k": ("dataset_k", int, str),
    "dataset.sep": ("dataset_sep", float, _fmt_float),
    "model.dims": ("model_dims", _parse_dims, _fmt_dims),
    "model.acts": ("model_acts", _parse_acts, _fmt_acts),
    "model.init_seed": ("model_init_seed", int, str),
    "optimizer.kind": ("opt_kind", str, str),
    "optimizer.lr": ("opt_lr", float, _fmt_float),
    "optimizer.lambda0": ("opt_lambda0", float, _fmt_float),
    "optimizer.lambda_fixed": ("opt_lambda_fixed", _parse_bool, _fmt_bool),
    "optimizer.reset_period": ("opt_reset_period", int, str),
    "optimizer.line_search": ("opt_line_search", _parse_bool, _fmt_bool),
    "optimizer.batch": ("opt_batch", int, str),
    "solver.max_iters": ("solver_max_iters", int, str),
    "solver.rtol": ("solver_rtol", float, _fmt_float),
    "solver.warm_scale": ("solver_warm_scale", float, _fmt_float),
    "metric.source": ("metric_source", str, str),
    "metric.batch_size": ("metric_batch_size", int, str),
    "metric.beta": ("metric_beta", float, _fmt_float),
    "run.steps": ("run_steps", int, str),
    "run.eval_every": ("run_eval_every", int, str),
    "run.out_dir": ("run_out_dir", str, str),
    "run.run_seed": ("run_seed", int, str),
}


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        field, parse, _ = CONFIG_KEYS[key]
        try:
            values[field] = parse(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key in sorted(CONFIG_KEYS):
        field, _, fmt = CONFIG_KEYS[key]
        lines.append(f"{key} = {fmt(getattr(cfg, field))}")
    return "\n".join(lines) + "\n"


def _resolved(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, run_out_dir=str(args.out))
    if args.seed is not None:
        cfg = replace(cfg, run_seed=args.seed)
    return resolve_config(cfg)


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(serialize_config(cfg), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _resolved(args)
    out_dir = Path(cfg.run_out_dir)
    _echo_config(cfg, out_dir)
    bundle = build_bundle(cfg)
    final = {"theta": None}

    def keep(step, theta, report):
        final["theta"] = theta

    try:
        records = run_training(cfg, bundle, out_dir / "log.csv", keep)
    except TrainingAborted as exc:
        (out_dir / "failure.txt").write_text(f"{exc}\n", encoding="utf-8")
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    model = init_mlp(list(cfg.model_dims), list(cfg.model_acts), cfg.model_init_seed)
    if final["theta"] is not None:
        model = model.with_params(final["theta"])
    save_mlp(model, out_dir / "model.ngmlp")
    print(f"wrote {len(records)} steps to {out_dir / 'log.csv'}")
    return 0


def cmd_check(args) -> int:
    suite = SUITES.get(args.suite)
    if suite is None:
        print(f"unknown check suite {args.suite!r}; pick one of {', '.join(SUITES)}", file=sys.stderr)
        return 1
    print(f"running check suite '{args.suite}'")
    ok = suite()
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_experiment(args) -> int:
    cfg = _resolved(args)
    out_dir = Path(cfg.run_out_dir)
    _echo_config(cfg, out_dir)
    try:
        if args.name == "bench":
            logs = bench_experiment(cfg, out_dir)
            print(f"benchmark logs: {', '.join(sorted(logs))} in {out_dir}")
        elif args.name == "metric-source":
            logs = metric_source_experiment(cfg, out_dir)
            print(f"metric-source logs: {', '.join(sorted(logs))} in {out_dir}")
        elif args.name == "robustness":
            curve_sgd, curve_ngd = robustness_protocol(cfg)
            write_variance_csv(out_dir / "variance_sgd.csv", curve_sgd)
            write_variance_csv(out_dir / "variance_ngd.csv", curve_ngd)
            print(
                f"robustness curves in {out_dir} "
                f"(valid error sgd {curve_sgd.valid_error:.3f}, ngd {curve_ngd.valid_error:.3f})"
            )
        else:
            print(f"unknown experiment {args.name!r}", file=sys.stderr)
            return 1
    except TrainingAborted as exc:
        (out_dir / "failure.txt").write_text(f"{exc}\n", encoding="utf-8")
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natgrad")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training loop from a config")
    train.add_argument("--config", required=True)
    train.add_argument("--out", default=None, help="override run.out_dir")
    train.add_argument("--seed", type=int, default=None, help="override run.run_seed")
    train.set_defaults(fn=cmd_train)

    check = sub.add_parser("check", help="run a self-check suite")
    check.add_argument("suite", choices=sorted(SUITES))
    check.set_defaults(fn=cmd_check)

    exp = sub.add_parser("experiment", help="run a named experiment")
    exp.add_argument("name", help="bench | metric-source | robustness")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out", default=None)
    exp.add_argument("--seed", type=int, default=None)
    exp.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
