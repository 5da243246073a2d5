"""Figures for evaluation curves, written to files next to the CSV tables."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def write_curve_csv(path: str | Path, steps, table: dict[str, dict[str, list[float]]]) -> Path:
    """One row per evaluation step, three columns (mean, ci95_low, ci95_high) per variant."""
    path = Path(path)
    names = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"{n}_{k}" for n in names for k in ("mean", "ci95_low", "ci95_high")])
        for i, s in enumerate(steps):
            w.writerow([s] + [f"{table[n][k][i]:.6g}" for n in names for k in ("mean", "ci95_low", "ci95_high")])
    return path


def plot_curves(path: str | Path, steps, table: dict[str, dict[str, list[float]]], title: str = "") -> Path:
    """Mean evaluation return per variant with a shaded 95% interval."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, cols in table.items():
            line, = ax.plot(steps, cols["mean"], label=name, lw=1.5)
            ax.fill_between(steps, cols["ci95_low"], cols["ci95_high"], color=line.get_color(), alpha=0.2, lw=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("evaluation return")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def metrics_table(records: list[dict]) -> tuple[list[str], list[list]]:
    """Flatten metric records into CSV columns; per-episode returns are dropped."""
    keys = sorted({k for r in records for k in r if k != "returns"})
    order = [k for k in ("step", "updates", "beta", "mean_return", "ci95_low", "ci95_high",
                         "distinct_state_bins") if k in keys]
    order += [k for k in keys if k not in order]
    return order, [[r.get(k, "") for k in order] for r in records]


def export_metrics(records: list[dict], csv_path: str | Path, png_path: str | Path | None = None) -> list[Path]:
    """Write a metrics log as CSV and, optionally, its return curve as PNG."""
    header, rows = metrics_table(records)
    out = [Path(csv_path)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    if png_path is not None:
        steps = [r["step"] for r in records]
        table = {"run": {k: [r[k] for r in records] for k in ("mean_return", "ci95_low", "ci95_high")}}
        table["run"]["mean"] = table["run"].pop("mean_return")
        out.append(plot_curves(png_path, steps, table))
    return out
