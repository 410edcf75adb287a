"""Deterministic SVG figures for the perturbation-norm summaries."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import EmptyReport

_METRICS = (
    ("l0_frac_mean", "Share of pixels perturbed", "norms_l0.svg"),
    ("l2_mean", "Mean L2 perturbation", "norms_l2.svg"),
    ("linf_mean", "Mean Linf perturbation", "norms_linf.svg"),
)


def emit_plots(report, output_dir, config_hash: str = "") -> list[Path]:
    """Grouped bar charts (one SVG per norm metric): attacks on the x axis,
    one bar per (tier, objective) within each group. Byte-deterministic for
    identical reports."""
    norms = report.norms if hasattr(report, "norms") else report["norms"]
    if not norms:
        raise EmptyReport("report contains no norm summaries")
    if hasattr(report, "norms"):
        entries = {k: vars(v) for k, v in report.norms.items()}
    else:
        entries = {tuple(k.split("|")): v for k, v in report["norms"].items()}

    attacks = sorted({k[2] for k in entries})
    series = sorted({(k[0], k[1]) for k in entries})
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context({"svg.hashsalt": config_hash or "ibrobust"}):
        for field, title, filename in _METRICS:
            fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(attacks), 3.2))
            width = 0.8 / max(len(series), 1)
            for si, (tier, objective) in enumerate(series):
                xs, ys = [], []
                for ai, attack in enumerate(attacks):
                    key = (tier, objective, attack)
                    if key in entries:
                        xs.append(ai + si * width)
                        ys.append(entries[key][field])
                ax.bar(xs, ys, width=width, label=f"{tier}/{objective}")
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(attacks))])
            ax.set_xticklabels(attacks)
            ax.set_ylabel(title)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / filename
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written


def plot_probe_curve(rows: list[dict], output_dir, config_hash: str = "") -> Path:
    """Reconstruction error against layer depth (the information-path view)."""
    if not rows:
        raise EmptyReport("no probe rows to plot")
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "probe_mse.svg"
    with plt.rc_context({"svg.hashsalt": config_hash or "ibrobust"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        xs = [r["layer"] for r in rows]
        ys = [r["mse"] for r in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("layer index")
        ax.set_ylabel("probe reconstruction MSE")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
