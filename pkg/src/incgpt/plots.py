"""Loss-curve plots with equal-compute markers.

CSV mirrors of the plotted data are written first and are never touched by
plotting failures; the SVG is best-effort (a missing/broken matplotlib
degrades to CSV-only output).
"""

import csv
import sys
from pathlib import Path

from incgpt.harness import TRACE_HEADER


def _write_series_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER.split(","))
        for r in trace.rows:
            w.writerow([r.step, r.tokens, r.cum_cost, r.mode,
                        repr(r.train_loss),
                        "" if r.val_loss is None else repr(r.val_loss)])


def emit_plots(traces, markers, out_path):
    """Render loss vs. step for each named trace, with circular markers.

    traces: {label: RunTrace}; markers: [(label, step)] placed on that
    label's validation curve. Returns a manifest dict describing what was
    written: {"plot": path | None, "csv": {label: path}, "series": [...],
    "markers": [(label, step, loss)]}.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    stem = out_path.with_suffix("")

    manifest = {"plot": None, "csv": {}, "series": list(traces), "markers": []}
    for label, trace in traces.items():
        csv_path = Path(f"{stem}.{label}.csv")
        _write_series_csv(csv_path, trace)
        manifest["csv"][label] = str(csv_path)

    marker_points = []
    for label, step in markers:
        trace = traces.get(label)
        if trace is None:
            continue
        loss = None
        for r in trace.rows:
            if r.step >= step and r.val_loss is not None:
                loss = r.val_loss
                break
        if loss is not None:
            marker_points.append((label, step, loss))
    manifest["markers"] = marker_points

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(9, 5.5))
        colors = {}
        for label, trace in traces.items():
            color = None
            val = trace.val_series()
            if val:
                steps, losses = zip(*val)
                (line,) = ax.plot(steps, losses, label=f"{label} (val)")
                color = colors[label] = line.get_color()
            tr = trace.loss_series()
            if tr:
                steps, losses = zip(*tr)
                ax.plot(steps, losses, color=color, alpha=0.25, linewidth=0.7)
        for label, step, loss in marker_points:
            ax.plot([step], [loss], marker="o", markersize=11,
                    color=colors.get(label, "black"), linestyle="none")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("training (faint) and validation loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_path, format=out_path.suffix.lstrip(".") or "svg")
        plt.close(fig)
        manifest["plot"] = str(out_path)
    except Exception as exc:  # CSVs above are already safely on disk
        print(f"warning: plot rendering failed: {exc}", file=sys.stderr)
    return manifest
