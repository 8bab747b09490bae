"""Figures for bench reports, written next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402


def figure_path(out_file: str | Path) -> Path:
    return Path(out_file).with_suffix(".png")


def plot_report(report: BenchReport, path: str | Path) -> Path:
    """Two panels: handshake time per run and handshake bytes per run."""
    path = Path(path)
    runs = [r.run for r in report.rows]
    colors = ["tab:blue" if r.success else "tab:red" for r in report.rows]

    fig, (ax_t, ax_b) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True)
    ax_t.bar(runs, [r.seconds for r in report.rows], color=colors)
    ax_t.set_ylabel("handshake time (s)")
    summary = report.summary()
    if summary["median"] is not None:
        ax_t.axhline(summary["median"], color="k", lw=0.8, ls="--", label=f"median {summary['median']:.3f} s")
        ax_t.legend(loc="upper right", frameon=False)

    ax_b.bar(runs, [r.bandwidth for r in report.rows], color=colors)
    ax_b.set_ylabel("bytes on the wire")
    ax_b.set_xlabel("run")
    rate = summary["success_rate"]
    rate_txt = "n/a" if rate is None else f"{rate:.0%}"
    fig.suptitle(f"{report.target}, pad_max={report.pad_max}, success {rate_txt}")
    for ax in (ax_t, ax_b):
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
