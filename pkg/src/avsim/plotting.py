"""Report figures: grouped precision/recall bars per scenario and threshold.

SVG output is byte-deterministic (fixed hash salt, no date metadata), so a
rerun with the same report produces an identical file.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError

_SCENARIO_COLORS = {"morning": "#e8a33d", "night": "#3d5a80"}
_FALLBACK_COLORS = ["#7fb069", "#b0413e", "#726da8", "#5c8001"]

_DET_RC = {
    "svg.hashsalt": "avsim",
    "svg.fonttype": "path",
    "figure.dpi": 100,
}


def render_report_figure(rows, out_path):
    """Write a grouped bar chart (precision and recall vs IoU threshold, one
    bar group per scenario) as a self-contained SVG."""
    rows = list(rows)
    if not rows:
        raise ConfigError("report is empty, nothing to plot")
    scenarios = []
    taus = []
    for r in rows:
        if r.scenario not in scenarios:
            scenarios.append(r.scenario)
        if r.tau not in taus:
            taus.append(r.tau)
    taus.sort()
    by_key = {(r.scenario, r.tau): r for r in rows}

    def color(i, name):
        return _SCENARIO_COLORS.get(name, _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)])

    with plt.rc_context(_DET_RC):
        fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6), sharey=True)
        width = 0.8 / max(len(scenarios), 1)
        for ax, metric in zip(axes, ("precision", "recall")):
            for i, sc in enumerate(scenarios):
                values = []
                for t in taus:
                    row = by_key.get((sc, t))
                    v = getattr(row, metric) if row is not None else None
                    values.append(0.0 if v is None else v)
                xs = [k + (i - (len(scenarios) - 1) / 2.0) * width
                      for k in range(len(taus))]
                ax.bar(xs, values, width=width, label=sc.capitalize(),
                       color=color(i, sc), edgecolor="black", linewidth=0.4)
            ax.set_xticks(range(len(taus)))
            ax.set_xticklabels([f"{t:g}" for t in taus])
            ax.set_xlabel("IoU threshold")
            ax.set_ylim(0.0, 1.05)
            ax.set_title(metric.capitalize())
            ax.grid(axis="y", linewidth=0.3, alpha=0.5)
        axes[0].set_ylabel("value")
        axes[0].legend(frameon=False, fontsize=9)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
