#!/usr/bin/env python3
"""
Renders every CSV of a run directory into a PNG with the same stem, next to it.

Plots read nothing but their CSV, so regenerating them from the CSVs alone
reproduces the same data.
"""
import os
import re
import json
import fnmatch
from typing import Callable, List, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .utils import log

ACCURACY_COLUMNS = ["clean_acc", "perturbed_acc", "fgsm_acc", "pgd10_acc"]
LOSS_COLUMNS = ["train_loss_clean", "train_loss_adv"]
DPI = 150


def _save(fig, csv_path: str) -> str:
    png_path = os.path.splitext(csv_path)[0] + ".png"
    fig.savefig(png_path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return png_path


def plot_training_dynamics(csv_path: str) -> str:
    """Accuracies and training losses per epoch (metrics.csv, probe CSVs)."""
    frame = pd.read_csv(csv_path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4.5))
    for column in ACCURACY_COLUMNS:
        if column in frame:
            ax1.plot(frame["epoch"], frame[column], marker="o", markersize=3, label=column)
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Accuracy (%)")
    ax1.set_ylim(0, 100)
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    for column in LOSS_COLUMNS:
        if column in frame:
            ax2.plot(frame["epoch"], frame[column], label=column)
    ax2.set_xlabel("Epoch")
    ax2.set_ylabel("Loss")
    ax2.legend()
    ax2.grid(True, alpha=0.3)
    fig.suptitle(os.path.basename(os.path.dirname(os.path.abspath(csv_path))))
    return _save(fig, csv_path)


def plot_distance_matrix(csv_path: str) -> str:
    frame = pd.read_csv(csv_path, index_col=0)
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(frame.values, cmap="viridis")
    ax.set_xticks(range(len(frame.columns)))
    ax.set_xticklabels(frame.columns, rotation=90, fontsize=7)
    ax.set_yticks(range(len(frame.index)))
    ax.set_yticklabels(frame.index, fontsize=7)
    fig.colorbar(image, ax=ax, label="Sliced Wasserstein distance")
    ax.set_title(os.path.splitext(os.path.basename(csv_path))[0])
    return _save(fig, csv_path)


def plot_weight_histogram(csv_path: str) -> str:
    frame = pd.read_csv(csv_path)
    layers = list(dict.fromkeys(frame["layer"]))
    buckets = frame[frame["layer"] == layers[0]][["bucket_low", "bucket_high"]].values
    labels = [f"[{low:g}, {high:g})" for low, high in buckets]
    width = 0.8 / max(1, len(layers))
    fig, ax = plt.subplots(figsize=(10, 4.5))
    x = np.arange(len(labels))
    for i, layer in enumerate(layers):
        rows = frame[frame["layer"] == layer]
        ax.bar(x + i * width, rows["percent"].values, width, label=f"{layer} (max r {rows['max_r'].iloc[0]:.2f})")
    ax.set_xticks(x + width * (len(layers) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_yscale("log")
    ax.set_xlabel("r = ||w| - w_bar| / w_bar")
    ax.set_ylabel("Weights (%)")
    ax.legend(fontsize=7)
    return _save(fig, csv_path)


def plot_similarity(csv_path: str) -> str:
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for column in frame.columns:
        if column != "epoch":
            ax.plot(frame["epoch"], frame[column], marker="o", markersize=3, label=column)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Cosine similarity")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, csv_path)


def plot_embedding(csv_path: str) -> str:
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 6))
    scatter = ax.scatter(frame["x"], frame["y"], c=frame["label"], cmap="tab10", s=6)
    ax.legend(*scatter.legend_elements(), title="Class", fontsize=7, loc="best")
    ax.set_title(os.path.splitext(os.path.basename(csv_path))[0])
    return _save(fig, csv_path)


def plot_sweep(csv_path: str) -> str:
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for column in ("post_pgd10_acc", "best_pgd10_acc", "final_pgd10_acc"):
        if column in frame and frame[column].notna().any():
            ax.plot(frame["value"], frame[column], marker="o", label=column)
    if (frame["value"] > 0).all() and frame["value"].max() / max(frame["value"].min(), 1e-12) >= 100:
        ax.set_xscale("log")
    ax.set_xlabel(re.sub(r"^sweep_", "", os.path.splitext(os.path.basename(csv_path))[0]))
    ax.set_ylabel("PGD-10 accuracy (%)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, csv_path)


def plot_bars(label_column: str, value_columns: List[str]) -> Callable[[str], str]:
    """Grouped bar chart of value_columns per row, labeled by label_column."""
    def render(csv_path: str) -> str:
        frame = pd.read_csv(csv_path)
        columns = [c for c in value_columns if c in frame]
        width = 0.8 / max(1, len(columns))
        x = np.arange(len(frame))
        fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(frame) * len(columns)), 4.5))
        for i, column in enumerate(columns):
            ax.bar(x + i * width, frame[column].fillna(0).values, width, label=column)
        ax.set_xticks(x + width * (len(columns) - 1) / 2)
        ax.set_xticklabels([str(v) for v in frame[label_column]])
        ax.set_ylabel("Accuracy (%)")
        ax.legend(fontsize=7)
        return _save(fig, csv_path)
    return render


def plot_timings(csv_path: str) -> str:
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(frame["epoch"], frame["seconds"])
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Seconds")
    return _save(fig, csv_path)


def _accuracy_columns(csv_path: str) -> List[str]:
    return [c for c in pd.read_csv(csv_path, nrows=0).columns if c.endswith("_acc")]


# filename pattern -> renderer; first match wins
PLOTTERS: List[Tuple[str, Callable[[str], str]]] = [
    ("metrics.csv", plot_training_dynamics),
    ("probe-seed-*.csv", plot_training_dynamics),
    ("distance_*.csv", plot_distance_matrix),
    ("histogram_*.csv", plot_weight_histogram),
    ("similarity.csv", plot_similarity),
    ("embedding_*.csv", plot_embedding),
    ("trigger_*.csv", plot_bars("class", ["clean_target_rate", "injected_target_rate"])),
    ("sweep_*.csv", plot_sweep),
    ("timings.csv", plot_timings),
    ("summary.csv", plot_bars("seed", ["best_clean_acc", "best_pgd10_acc", "final_clean_acc",
                                       "final_fgsm_acc", "final_pgd10_acc"])),
    ("transfer.csv", plot_bars("trainer", ["clean_test_acc"])),
    ("paradigms.csv", plot_bars("paradigm", ["clean_test_acc"])),
    ("noise_defense.csv", plot_bars("noise_scale", ["clean_test_acc"])),
    ("eval.csv", lambda path: plot_bars("checkpoint", _accuracy_columns(path))(path)),
    ("eval-*.csv", lambda path: plot_bars("checkpoint", _accuracy_columns(path))(path)),
    ("recovery.csv", lambda path: plot_bars("stage", _accuracy_columns(path))(path)),
]


def expected_artifacts(run_dir: str) -> List[str]:
    """CSV files a completed training run should contain, given its saved configuration."""
    toggles = {"distance_matrix": True, "histogram": True, "similarity": True, "embedding": True,
               "trigger": True}
    config_path = os.path.join(run_dir, "config.json")
    if os.path.exists(config_path):
        with open(config_path, 'r', encoding='utf-8') as f:
            toggles.update({k: v for k, v in json.load(f).get("diagnostics", {}).items() if k in toggles})
    per_seed = ["metrics.csv", "eval.csv"]
    per_seed += [f"{prefix}_final.csv" for key, prefix in (("distance_matrix", "distance"),
                                                           ("histogram", "histogram"),
                                                           ("embedding", "embedding"),
                                                           ("trigger", "trigger")) if toggles[key]]
    if toggles["similarity"]:
        per_seed.append("similarity.csv")
    expected = []
    for entry in sorted(os.listdir(run_dir)):
        if entry.startswith("seed-") and os.path.isdir(os.path.join(run_dir, entry)):
            expected += [os.path.join(run_dir, entry, name) for name in per_seed]
    return expected


def emit_plots(run_dir: str) -> Tuple[List[str], List[str]]:
    """
    Renders a PNG twin for every recognized CSV under run_dir.

    Args:
        run_dir: Run directory

    Returns:
        Tuple of (emitted PNG paths, missing or unrenderable artifacts)

    Raises:
        FileNotFoundError: If run_dir does not exist
    """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"Run directory not found: {run_dir}")
    emitted: List[str] = []
    missing = [path for path in expected_artifacts(run_dir) if not os.path.exists(path)]
    for path in missing:
        log.warning(f"Missing artifact: {path}")

    for root, _, files in sorted(os.walk(run_dir)):
        for name in sorted(files):
            if not name.endswith(".csv"):
                continue
            renderer = next((plot for pattern, plot in PLOTTERS if fnmatch.fnmatch(name, pattern)), None)
            if renderer is None:
                log.debug(f"No plot for {name}")
                continue
            csv_path = os.path.join(root, name)
            try:
                emitted.append(renderer(csv_path))
            except (KeyError, ValueError, IndexError, pd.errors.EmptyDataError) as e:
                plt.close("all")
                log.warning(f"Could not plot {csv_path}: {e}")
                missing.append(csv_path)
    log.info(f"Emitted {len(emitted)} plots, {len(missing)} artifacts missing")
    return emitted, missing
