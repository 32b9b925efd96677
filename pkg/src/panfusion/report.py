"""Rendering of metric results: aligned tables, CSV, JSON, and figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_ORDER = ("sam", "ergas", "psnr", "ssim", "scc", "q_avg",
                "d_lambda", "d_s", "qnr")


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _columns(rows: list[dict]) -> list[str]:
    cols = [c for c in METRIC_ORDER if any(c in r for r in rows)]
    return ["name"] + cols if any("name" in r for r in rows) else cols


def aligned_table(rows: list[dict]) -> str:
    """Fixed-width text table with one row per dict, columns padded."""
    cols = _columns(rows)
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def write_csv(rows: list[dict], path: str | Path) -> None:
    cols = _columns(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in cols])


def summarize(rows: list[dict]) -> dict:
    """Mean and standard deviation of every metric present in the rows."""
    out = {}
    for c in METRIC_ORDER:
        values = [r[c] for r in rows if c in r]
        if values:
            out[c] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
    return out


def report_doc(methods: dict[str, list[dict]], config: dict) -> dict:
    """Bundle per-method image rows and summaries into one JSON document."""
    return {
        "config": config,
        "methods": {
            name: {"images": rows, "summary": summarize(rows)}
            for name, rows in methods.items()
        },
    }


def write_report(doc: dict, out_dir: str | Path) -> dict[str, Path]:
    """Emit metrics.json / metrics.csv / metrics.txt and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "metrics.json",
        "csv": out_dir / "metrics.csv",
        "txt": out_dir / "metrics.txt",
    }
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n")
    flat = []
    for method, rec in doc["methods"].items():
        for row in rec["images"]:
            flat.append({"name": f"{method}/{row.get('name', '?')}",
                         **{k: v for k, v in row.items() if k != "name"}})
        flat.append({"name": f"{method}/mean",
                     **{k: v["mean"] for k, v in rec["summary"].items()}})
    write_csv(flat, paths["csv"])
    paths["txt"].write_text(aligned_table(flat) + "\n")
    return paths


def overview_figure(doc: dict, path: str | Path,
                    metrics: tuple[str, ...] = ("ergas", "sam")) -> Path:
    """Grouped per-image bars comparing every method on a few metrics."""
    methods = doc["methods"]
    present = [m for m in metrics
               if all(all(m in r for r in rec["images"]) for rec in methods.values())]
    if not present:
        present = [next(iter(summarize(next(iter(methods.values()))["images"])))]
    fig, axes = plt.subplots(1, len(present), figsize=(5.5 * len(present), 3.4))
    if len(present) == 1:
        axes = [axes]
    for ax, metric in zip(axes, present):
        names = [r.get("name", str(i))
                 for i, r in enumerate(next(iter(methods.values()))["images"])]
        x = np.arange(len(names))
        width = 0.8 / len(methods)
        for j, (method, rec) in enumerate(methods.items()):
            vals = [r[metric] for r in rec["images"]]
            ax.bar(x + j * width, vals, width, label=method)
        ax.set_title(metric)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _stretch(band: np.ndarray) -> np.ndarray:
    lo, hi = float(band.min()), float(band.max())
    if hi <= lo:
        return np.zeros_like(band)
    return (band - lo) / (hi - lo)


def save_preview_png(path: str | Path, image: np.ndarray) -> Path:
    """8-bit preview with a per-band min-max stretch (display only).

    Uses the first three bands as RGB when available, otherwise grayscale.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected (bands, h, w), got {image.shape}")
    if image.shape[0] >= 3:
        rgb = np.stack([_stretch(image[i]) for i in range(3)], axis=-1)
        plt.imsave(path, rgb)
    else:
        plt.imsave(path, _stretch(image[0]), cmap="gray", vmin=0.0, vmax=1.0)
    return Path(path)


def save_error_map_png(path: str | Path, candidate: np.ndarray,
                       reference: np.ndarray) -> Path:
    """Grayscale mean absolute error per pixel, stretched to its own max."""
    err = np.abs(np.asarray(candidate, dtype=np.float64)
                 - np.asarray(reference, dtype=np.float64)).mean(axis=0)
    peak = float(err.max())
    plt.imsave(path, err / peak if peak > 0 else err, cmap="gray",
               vmin=0.0, vmax=1.0)
    return Path(path)
