#!/usr/bin/env python3
"""Figure generation from training-run CSV logs.

Reads the optimizer's CSV outputs and renders the three figure kinds as
both SVG and PNG; no computation beyond axis transforms happens here.

    plots.py --kind curves        --csv ngd.csv sgd.csv --labels ngd sgd --out fig
    plots.py --kind variance      --csv variance_sgd.csv variance_ngd.csv --out fig
    plots.py --kind metric-source --csv same.csv disjoint.csv unlabeled.csv \
             --labels same disjoint unlabeled --out fig
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

LOG_HEADER = "step,wall_ms,train_loss,valid_loss,cg_iters,cg_residual,rho,lambda,grad_norm"
VARIANCE_HEADER = "segment,optimizer,mean_variance"

matplotlib.rcParams.update(
    {
        "font.family": "DejaVu Sans",
        "font.size": 9,
        "svg.hashsalt": "natgrad-plots",
        "figure.dpi": 110,
    }
)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    """One figure request: which CSVs, their labels, the axes family and the
    output basename (extensions are added per written format)."""

    kind: str  # curves | variance | metric-source
    csv_paths: tuple
    labels: tuple
    out: str

    def __post_init__(self):
        if self.kind not in ("curves", "variance", "metric-source"):
            raise SchemaError(f"unknown figure kind {self.kind!r}")
        if len(self.labels) != len(self.csv_paths):
            raise SchemaError("labels must match csv files one to one")
        for p in self.csv_paths:
            if not Path(p).is_file():
                raise SchemaError(f"csv file not found: {p}")


def read_csv_columns(path, expected_header):
    text = Path(path).read_text(encoding="utf-8").strip()
    lines = text.split("\n") if text else []
    if not lines or not lines[0]:
        raise SchemaError(f"{path}: empty csv")
    header = lines[0].split(",")
    expected = expected_header.split(",")
    for col in expected:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    if len(lines) < 2:
        raise SchemaError(f"{path}: no data rows")
    columns = {name: [] for name in header}
    for row in lines[1:]:
        cells = row.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}: ragged row {row!r}")
        for name, cell in zip(header, cells):
            try:
                columns[name].append(float(cell))
            except ValueError:
                columns[name].append(cell)  # label columns stay as text
    return columns


def _save(fig, out_base):
    out_base = Path(out_base)
    if out_base.suffix in (".png", ".svg"):
        out_base = out_base.with_suffix("")
    out_base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for ext in ("svg", "png"):
        target = out_base.with_suffix("." + ext)
        fig.savefig(target)
        written.append(target)
    plt.close(fig)
    return written


def plot_training_curves(csv_paths, labels, out_base):
    """Two-panel log-log training curves: loss per update and per second."""
    runs = [read_csv_columns(p, LOG_HEADER) for p in csv_paths]
    fig, (ax_steps, ax_time) = plt.subplots(1, 2, figsize=(9, 3.6))
    for cols, label in zip(runs, labels):
        ax_steps.loglog(cols["step"], cols["train_loss"], label=label)
        seconds = [max(ms / 1000.0, 1e-3) for ms in cols["wall_ms"]]
        ax_time.loglog(seconds, cols["train_loss"], label=label)
    ax_steps.set_xlabel("updates")
    ax_steps.set_ylabel("training loss")
    ax_time.set_xlabel("wall-clock seconds")
    ax_time.set_ylabel("training loss")
    for ax in (ax_steps, ax_time):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    written = _save(fig, out_base)
    points = sum(len(c["step"]) for c in runs)
    return written, points


def plot_variance_curves(csv_paths, out_base):
    """Per-segment output variance for two optimizers, log-scale y."""
    if len(csv_paths) != 2:
        raise SchemaError("variance figure expects exactly two csv files")
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    points = 0
    for path in csv_paths:
        cols = read_csv_columns(path, VARIANCE_HEADER)
        if len(cols["segment"]) != 10:
            raise SchemaError(f"{path}: expected 10 segments, found {len(cols['segment'])}")
        label = Path(path).stem.replace("variance_", "")
        ax.semilogy(cols["segment"], cols["mean_variance"], marker="o", label=label)
        points += len(cols["segment"])
    ax.set_xlabel("resampled segment")
    ax.set_ylabel("mean output variance")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_base), points


def plot_metric_source(csv_paths, labels, out_base):
    """Training loss (top) and held-out loss (bottom) against updates."""
    runs = [read_csv_columns(p, LOG_HEADER) for p in csv_paths]
    fig, (ax_train, ax_valid) = plt.subplots(2, 1, figsize=(5.2, 6.2), sharex=True)
    for cols, label in zip(runs, labels):
        ax_train.semilogy(cols["step"], cols["train_loss"], label=label)
        ax_valid.semilogy(cols["step"], cols["valid_loss"], label=label)
    ax_train.set_ylabel("training loss")
    ax_valid.set_ylabel("held-out loss")
    ax_valid.set_xlabel("updates")
    for ax in (ax_train, ax_valid):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    written = _save(fig, out_base)
    points = sum(len(c["step"]) for c in runs)
    return written, points


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plots.py", description=__doc__)
    parser.add_argument("--kind", required=True, choices=["curves", "variance", "metric-source"])
    parser.add_argument("--csv", required=True, nargs="+")
    parser.add_argument("--labels", nargs="*", default=None)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    labels = args.labels or [Path(p).stem for p in args.csv]
    try:
        spec = FigureSpec(args.kind, tuple(args.csv), tuple(labels), args.out)
        if spec.kind == "curves":
            written, points = plot_training_curves(spec.csv_paths, spec.labels, spec.out)
        elif spec.kind == "variance":
            written, points = plot_variance_curves(spec.csv_paths, spec.out)
        else:
            written, points = plot_metric_source(spec.csv_paths, spec.labels, spec.out)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"plotted {points} points -> " + ", ".join(str(w) for w in written))
    return 0


if __name__ == "__main__":
    sys.exit(run())
