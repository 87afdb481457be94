"""Figures for benchmark reports; rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_results", "plot_metric"]

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

_RULE_ORDER = ("bagging", "moe", "poe", "gpoe", "tree_gpoe")


def plot_metric(results: dict, metric: str, path, title: str | None = None):
    """Grouped bar chart: one group per strategy, one bar per fusion rule.

    Rules without a value for ``metric`` (bagging SNLP) are drawn as a hatched
    placeholder labelled N/A.
    """
    records = results["records"]
    strategies = list(dict.fromkeys(r["strategy"] for r in records))
    rules = [r for r in _RULE_ORDER if any(rec["rule"] == r for rec in records)]
    lookup = {(r["strategy"], r["rule"]): r.get(metric) for r in records}
    width = 0.8 / max(len(rules), 1)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.4 + 1.2 * len(strategies), 2.6))
        for k, rule in enumerate(rules):
            xs, hs, missing = [], [], []
            for i, s in enumerate(strategies):
                if (s, rule) not in lookup:
                    continue
                x = i - 0.4 + width * (k + 0.5)
                value = lookup[(s, rule)]
                if value is None:
                    missing.append(x)
                else:
                    xs.append(x)
                    hs.append(value)
            bars = ax.bar(xs, hs, width=width, label=rule, color=f"C{k}")
            for b in bars:
                b.set_edgecolor("k")
                b.set_linewidth(0.4)
            for x in missing:
                ax.bar([x], [0.0], width=width, color="none", edgecolor=f"C{k}", hatch="//")
                ax.annotate("N/A", (x, 0.0), ha="center", va="bottom", fontsize=6,
                            rotation=90)
        ax.axhline(0.0, color="k", linewidth=0.6)
        ax.set_xticks(np.arange(len(strategies)))
        ax.set_xticklabels(strategies)
        ax.set_ylabel(metric.upper())
        ax.set_title(title or f"{results['dataset']}: {metric.upper()}")
        if metric == "snlp" and any(v is not None and v > 50 for v in lookup.values()):
            ax.set_yscale("symlog")
        ax.legend(frameon=False, ncol=min(len(rules), 3))
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return Path(path)


def plot_results(results: dict, directory) -> list:
    """Render one figure per metric into ``directory``; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        plot_metric(results, metric, directory / f"{metric}.png")
        for metric in ("smse", "snlp", "rmse")
    ]
