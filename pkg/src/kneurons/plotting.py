"""Render serialized result files to SVG/PNG.  Never touches a model."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ArgumentError  # noqa: E402


def _series(ax, x, y, label, style, ci=None, offset=0.0, width=0.8):
    y = np.asarray([np.nan if v is None else v for v in y], dtype=float)
    if style == "bar":
        ax.bar(np.asarray(x) + offset, y, width=width, label=label)
    else:
        (line,) = ax.plot(x, y, marker="o", label=label)
        if ci is not None:
            ci = np.asarray([0.0 if v is None else v for v in ci], dtype=float)
            ax.fill_between(x, y - ci, y + ci, alpha=0.2, color=line.get_color())


def _layers(n):
    return list(range(1, n + 1))


def _plot_layer_stats(data, style):
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    x = _layers(len(data["mean"]))
    for ax, key, ci in zip(axes, ("mean", "std", "max"), ("mean_ci", None, "max_ci")):
        _series(ax, x, data[key], key, style, data.get(ci) if ci else None)
        ax.set_xlabel("layer")
        ax.set_title(f"layer-wise {key} (n={data['n_prompts']})")
        ax.set_xticks(x)
    return fig


def _plot_overlap_curve(data, style):
    fig, ax = plt.subplots(figsize=(6, 4))
    curves = data["curves"] if "curves" in data else [data]
    for k, c in enumerate(curves):
        _series(ax, c["t_grid"], c["jaccard"], c.get("label") or "jaccard", style,
                offset=0.01 * k, width=0.01)
    ax.set_xlabel("threshold t")
    ax.set_ylabel("overlap (Jaccard)")
    ax.set_title(f"refined-set overlap, P={curves[0]['p']}%")
    ax.legend()
    return fig


def _plot_layer_overlap(data, style):
    fig, ax = plt.subplots(figsize=(6, 4))
    _series(ax, data["layers"], data["counts"], f"t={data['t']}", style)
    ax.set_xlabel("layer")
    ax.set_ylabel("common neurons")
    ax.set_xticks(data["layers"])
    ax.legend()
    return fig


def _plot_grammar(data, style):
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key in zip(axes, ("max", "mean")):
        for polarity in ("good", "bad"):
            s = data["overall"][polarity]
            x = _layers(len(s[key]))
            _series(ax, x, s[key], polarity, style, s.get(f"{key}_ci"))
        ax.set_xlabel("layer")
        ax.set_title(f"{key} attribution per layer")
        ax.legend()
    return fig


def _plot_grammar_counts(data, style):
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, key in zip(axes, ("common", "distinct")):
        for stratum, entry in data["counts"].items():
            x = _layers(len(entry[key]))
            _series(ax, x, entry[key], f"{stratum} attractors", style, entry[f"{key}_ci"])
        ax.set_xlabel("layer")
        ax.set_title(f"{key} refined neurons (good vs bad)")
        ax.legend()
    return fig


PLOTTERS = {
    "kneurons.layer_stats": _plot_layer_stats,
    "kneurons.overlap_curve": _plot_overlap_curve,
    "kneurons.layer_overlap": _plot_layer_overlap,
    "kneurons.grammar": _plot_grammar,
}


def plot_result(data: dict, out: str | Path, style: str = "line", what: str | None = None) -> None:
    schema = data.get("schema")
    if schema == "kneurons.grammar" and what == "counts":
        plotter = _plot_grammar_counts
    else:
        plotter = PLOTTERS.get(schema)
    if plotter is None:
        raise ArgumentError(f"no plot for result schema {schema!r}")
    fig = plotter(data, style)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
