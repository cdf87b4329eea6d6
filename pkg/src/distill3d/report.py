"""Training-report rendering: figures and a summary table from metrics.jsonl."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError


def load_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"metrics file not found: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON line ({exc})") from exc
    return rows


def _by_stage(rows):
    stages = defaultdict(list)
    for row in rows:
        stages[row.get("stage", "?")].append(row)
    return stages


def render_report(metrics_path, out_dir) -> list[Path]:
    """Write summary.csv plus one figure per metric family; returns the paths."""
    rows = load_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    stages = _by_stage(rows)

    fig, ax = plt.subplots(figsize=(7, 4))
    for stage, srows in sorted(stages.items()):
        ax.plot([r["step"] for r in srows], [r["residual_norm"] for r in srows],
                label=f"{stage} ({srows[0].get('rule', '?')})", linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("denoiser residual norm")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("Score residual per distillation step")
    fig.tight_layout()
    path = out_dir / "residual_norm.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    plotted = False
    for stage, srows in sorted(stages.items()):
        groups = sorted({k for r in srows for k in r.get("grad_norms", {})})
        for g in groups:
            xs = [r["step"] for r in srows if g in r.get("grad_norms", {})]
            ys = [r["grad_norms"][g] for r in srows if g in r.get("grad_norms", {})]
            if xs:
                ax.plot(xs, ys, label=f"{stage}:{g}", linewidth=0.9)
                plotted = True
    if plotted:
        ax.set_xlabel("step")
        ax.set_ylabel("gradient norm")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        ax.set_title("Parameter-group gradient norms")
        fig.tight_layout()
        path = out_dir / "grad_norms.png"
        fig.savefig(path, dpi=130)
        written.append(path)
    plt.close(fig)

    holdout = [(r["step"], r["holdout_mse"]) for r in rows if "holdout_mse" in r]
    if holdout:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot([s for s, _ in holdout], [m for _, m in holdout], linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("held-out view MSE")
        ax.set_yscale("log")
        ax.set_title("Held-out reconstruction error")
        fig.tight_layout()
        path = out_dir / "holdout_mse.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)

    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "rule", "steps", "mean_residual_norm",
                         "final_residual_norm", "mean_t", "mean_duration_ms"])
        for stage, srows in sorted(stages.items()):
            rules = sorted({r.get("rule", "?") for r in srows})
            for rule in rules:
                rrows = [r for r in srows if r.get("rule") == rule]
                durs = [r["duration_ms"] for r in rrows if "duration_ms" in r]
                writer.writerow([
                    stage, rule, len(rrows),
                    f"{sum(r['residual_norm'] for r in rrows) / len(rrows):.6g}",
                    f"{rrows[-1]['residual_norm']:.6g}",
                    f"{sum(r['t'] for r in rrows) / len(rrows):.1f}",
                    f"{sum(durs) / len(durs):.3f}" if durs else "",
                ])
    written.append(summary)
    return written
