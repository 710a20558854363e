"""Render figures from persisted metric CSVs.

Three figure families, mirroring the analyses the pipeline supports:
per-epsilon multiplicity curves (one line per set definition, plus the
centralized pooled value where defined), per-sample metric CDFs per
epsilon, and the per-client fairness scatter. Every chart is written as
SVG with a sibling CSV holding exactly the plotted values.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import SCORE_METRICS  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fedrash"

_SVG_META = {"Date": None}


def _fmt(x) -> str:
    return repr(float(x))


def _load_cell_values(runner) -> dict:
    """values[(variant, epsilon, metric, scope, statistic)] = float"""
    from .pipeline import cell_label, variant_label

    payload = runner._load_selections()
    metrics_dir = runner._stage_dir("metrics")
    values = {}
    for cell in payload["cells"]:
        variant = variant_label(cell["definition"], cell["t"], cell["client_id"])
        label = cell_label(cell["definition"], cell["epsilon"], cell["t"], cell["client_id"])
        path = metrics_dir / f"metrics_{label}.csv"
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for metric, scope, statistic, value in reader:
                values[(variant, cell["epsilon"], metric, scope, statistic)] = float(value)
    return values


def _collect_series(values, metric, statistic, scope_for) -> dict:
    """variant -> sorted [(epsilon, value)], scope chosen per variant."""
    out = defaultdict(list)
    for (variant, eps, m, scope, stat), v in values.items():
        if m == metric and stat == statistic and scope == scope_for(variant):
            out[variant].append((eps, v))
    return {k: sorted(v) for k, v in out.items()}


def _style(variant: str) -> dict:
    if variant == "global":
        return {"color": "tab:blue", "linewidth": 2.0, "marker": "o", "zorder": 3}
    if variant.startswith("t_agreement"):
        shade = {"0.6": "tab:green", "0.75": "tab:olive", "0.9": "tab:red"}
        t = variant.split("_t")[-1]
        return {"color": shade.get(t, "tab:green"), "linestyle": "--", "marker": "s",
                "markersize": 4, "zorder": 2}
    if variant == "centralized":
        return {"color": "black", "linestyle": ":", "marker": "^", "markersize": 4, "zorder": 3}
    return {"color": "grey", "alpha": 0.45, "linewidth": 0.9, "zorder": 1}


def _curve_chart(out_dir: Path, name: str, series: dict, ylabel: str) -> list:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    labeled_individual = False
    for variant in sorted(series):
        pts = series[variant]
        if not pts:
            continue
        xs, ys = zip(*pts)
        label = variant
        if variant.startswith("individual"):
            label = None if labeled_individual else "individual clients"
            labeled_individual = True
        ax.plot(xs, ys, label=label, **_style(variant))
    ax.set_xlabel("epsilon")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    svg = out_dir / f"{name}.svg"
    fig.savefig(svg, metadata=_SVG_META)
    plt.close(fig)

    sibling = out_dir / f"{name}.csv"
    with open(sibling, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "epsilon", "value"])
        for variant in sorted(series):
            for eps, v in series[variant]:
                writer.writerow([variant, _fmt(eps), _fmt(v)])
    return [svg, sibling]


def render_multiplicity_curves(runner, out_dir: Path) -> list:
    values = _load_cell_values(runner)
    individual_scope = {}
    for variant, *_ in values:
        if variant.startswith("individual_c"):
            individual_scope[variant] = variant.rsplit("_c", 1)[-1]

    def scope_for(variant):
        return individual_scope.get(variant, "federated")

    quantities = [("rashomon", "ratio", "ratio", "empirical Rashomon ratio"),
                  ("ambiguity", "value", "ambiguity", "ambiguity"),
                  ("discrepancy", "value", "discrepancy", "discrepancy")]
    for metric in SCORE_METRICS:
        quantities.append((metric, "p50", metric, f"median {metric}"))

    outputs = []
    for metric, statistic, name, ylabel in quantities:
        series = _collect_series(values, metric, statistic, scope_for)
        if metric in ("ambiguity", "discrepancy"):
            pooled = _collect_series(values, metric, statistic, lambda v: "centralized")
            if pooled.get("global"):
                series["centralized"] = pooled["global"]
        if not any(series.values()):
            continue
        outputs += _curve_chart(out_dir, f"multiplicity_{name}", series, ylabel)
    return outputs


def render_cdf_charts(runner, out_dir: Path) -> list:
    metrics_dir = runner._stage_dir("metrics")
    outputs = []
    for metric in SCORE_METRICS:
        src = metrics_dir / f"cdf_{metric}.csv"
        if not src.exists():
            continue
        rows = []
        with open(src, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for variant, eps, edge, value in reader:
                rows.append((variant, float(eps), float(edge), float(value)))
        if not rows:
            continue
        variants = sorted({r[0] for r in rows})
        fig, axes = plt.subplots(
            1, len(variants), figsize=(3.4 * len(variants), 3.2), sharey=True, squeeze=False
        )
        for ax, variant in zip(axes[0], variants):
            eps_values = sorted({r[1] for r in rows if r[0] == variant})
            cmap = plt.get_cmap("viridis")
            for i, eps in enumerate(eps_values):
                pts = sorted((r[2], r[3]) for r in rows if r[0] == variant and r[1] == eps)
                xs, ys = zip(*pts)
                color = cmap(i / max(1, len(eps_values) - 1))
                ax.plot(xs, ys, drawstyle="steps-post", color=color,
                        label=f"eps={eps:g}", linewidth=1.1)
            ax.set_title(variant, fontsize=9)
            ax.set_xlabel(metric)
            ax.grid(alpha=0.3)
        axes[0][0].set_ylabel("cumulative fraction")
        axes[0][-1].legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        svg = out_dir / f"cdf_{metric}.svg"
        fig.savefig(svg, metadata=_SVG_META)
        plt.close(fig)

        sibling = out_dir / f"cdf_{metric}.csv"
        with open(sibling, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "epsilon", "upper_edge", "cdf"])
            for variant, eps, edge, value in rows:
                writer.writerow([variant, _fmt(eps), _fmt(edge), _fmt(value)])
        outputs += [svg, sibling]
    return outputs


def render_fairness_scatter(runner, out_dir: Path) -> list:
    src = runner._stage_dir("fairness") / "report.csv"
    if not src.exists():
        return []
    rows = []
    with open(src, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for client, candidate, accuracy, dp_gap, status in reader:
            if status != "ok":
                continue
            rows.append((client, int(candidate), float(accuracy), float(dp_gap)))
    if not rows:
        return []
    clients = sorted({r[0] for r in rows}, key=lambda c: (c == "global", c))
    fig, axes = plt.subplots(
        1, len(clients), figsize=(2.6 * len(clients), 3.0), sharey=True, squeeze=False
    )
    for ax, client in zip(axes[0], clients):
        pts = [(r[3], r[2]) for r in rows if r[0] == client]
        xs, ys = zip(*pts)
        ax.scatter(xs, ys, s=18, color="tab:purple", alpha=0.8)
        ax.set_title(f"client {client}" if client != "global" else "global", fontsize=9)
        ax.set_xlabel("dp gap")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("accuracy")
    fig.tight_layout()
    svg = out_dir / "fairness_scatter.svg"
    fig.savefig(svg, metadata=_SVG_META)
    plt.close(fig)

    sibling = out_dir / "fairness_scatter.csv"
    with open(sibling, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "candidate", "dp_gap", "accuracy"])
        for client, candidate, accuracy, dp_gap in rows:
            writer.writerow([client, candidate, _fmt(dp_gap), _fmt(accuracy)])
    return [svg, sibling]


def render_reports(runner, out_dir: Path) -> list:
    outputs = render_multiplicity_curves(runner, out_dir)
    outputs += render_cdf_charts(runner, out_dir)
    outputs += render_fairness_scatter(runner, out_dir)
    return outputs
