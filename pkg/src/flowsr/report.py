"""Plain-text and CSV tables, plus matplotlib figures for training and ablation runs."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return str(v)


def format_table(headers: Sequence[str], rows: Sequence[Sequence], title: str = "") -> str:
    """Aligned plain-text table: first column left-aligned, the rest right-aligned."""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, c in enumerate(row):
            widths[i] = max(widths[i], len(c))

    def line(items):
        parts = [items[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(items[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = []
    if title:
        out.append(title)
    out += [line(list(headers)), rule]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


def format_csv(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_report(report, out_dir, stem: str, per_sample: bool = True) -> Dict[str, Path]:
    """Write <stem>.txt and <stem>.csv for a MetricReport."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{stem}.txt"
    csv_path = out_dir / f"{stem}.csv"
    txt.write_text(report.to_table(per_sample))
    csv_path.write_text(report.to_csv(per_sample))
    return {"txt": txt, "csv": csv_path}


# -- figures -------------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def read_loss_log(path) -> List[float]:
    """Losses from a ``step loss lr`` log, skipping anything that is not such a record."""
    losses = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) == 3 and parts[0].isdigit():
            losses.append(float(parts[1]))
    return losses


def plot_loss_curve(losses: Sequence[float], path, window: int = 50, title: str = "training loss") -> Path:
    plt = _pyplot()
    losses = np.asarray(losses, dtype=np.float64)
    steps = np.arange(1, len(losses) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.6, alpha=0.4, label="per step")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1 :], smooth, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _to_rgb(img: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0)


def plot_comparison(lr, bicubic, pred, hr, path, title: str = "") -> Path:
    """LR | bicubic | prediction | HR | |prediction - HR| panel for one sample."""
    plt = _pyplot()
    err = np.abs(np.asarray(pred, dtype=np.float64) - hr).mean(axis=0)
    panels = [("LR", _to_rgb(lr)), ("bicubic", _to_rgb(bicubic)), ("model", _to_rgb(pred)), ("HR", _to_rgb(hr))]
    fig, axes = plt.subplots(1, 5, figsize=(15, 3.4))
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    im = axes[4].imshow(err, cmap="magma")
    axes[4].set_title("|model - HR|")
    axes[4].axis("off")
    fig.colorbar(im, ax=axes[4], fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows: Sequence[Sequence], path, title: str = "", metric_index: int = 1) -> Path:
    """Bar chart of one metric column (PSNR by default) across ablation rows."""
    plt = _pyplot()
    names = [str(r[0]) for r in rows]
    values = [float(r[metric_index]) for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.5))
    ax.bar(range(len(rows)), values, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    lo, hi = min(values), max(values)
    pad = max(0.05, 0.2 * (hi - lo))
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_ylabel("PSNR (dB)")
    for i, v in enumerate(values):
        ax.annotate(f"{v:.2f}", (i, v), ha="center", va="bottom", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_grid(values: np.ndarray, feu: Sequence[int], ffb: Sequence[int], path, title: str = "") -> Path:
    """Heat map of PSNR over the FEU x FFB grid."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(ffb)))
    ax.set_xticklabels([str(v) for v in ffb])
    ax.set_yticks(range(len(feu)))
    ax.set_yticklabels([str(v) for v in feu])
    ax.set_xlabel("FFB")
    ax.set_ylabel("FEU")
    for i in range(len(feu)):
        for j in range(len(ffb)):
            ax.text(j, i, f"{values[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
