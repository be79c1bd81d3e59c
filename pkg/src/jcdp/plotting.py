"""Report figures: per-arm accuracy bars, PSNR histograms and guidance traces.

All functions draw on the non-interactive Agg backend and write image files;
each returns the path it wrote.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ARM_COLORS = {"clean": "#4c72b0", "ue": "#c44e52", "purified": "#55a868"}

REPORT_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_bars(records, path, title: str = "clean-test accuracy") -> Path:
    """Grouped bars, one group per record, one bar per arm."""
    records = list(records)
    arms = [a for a in ("clean", "ue", "purified")
            if any(a in r.arms and "final_accuracy" in r.arms[a] for r in records)]
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(records) + 1.5), 2.8))
        width = 0.8 / max(len(arms), 1)
        x = np.arange(len(records))
        for i, arm in enumerate(arms):
            vals = [r.arms.get(arm, {}).get("final_accuracy", np.nan) for r in records]
            ax.bar(x + (i - (len(arms) - 1) / 2) * width, vals, width,
                   label=arm, color=ARM_COLORS.get(arm))
        ax.set_xticks(x)
        ax.set_xticklabels([r.name for r in records], rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("accuracy")
        ax.set_title(title)
        ax.legend(frameon=False, ncol=len(arms))
        return _save(fig, path)


def psnr_histogram(samples: dict[str, np.ndarray], path, bins: int = 30) -> Path:
    """Overlaid PSNR-to-clean histograms, one per labelled sample set."""
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for label, vals in samples.items():
            vals = np.asarray(vals)
            vals = vals[np.isfinite(vals)]
            ax.hist(vals, bins=bins, alpha=0.6, label=label,
                    color=ARM_COLORS.get(label))
        ax.set_xlabel("PSNR to clean (dB)")
        ax.set_ylabel("images")
        ax.legend(frameon=False)
        return _save(fig, path)


def guidance_trace(trace_csv: str, path) -> Path:
    """Mean guidance magnitudes and mean-shift size per reverse step.

    ``trace_csv`` is the text written by ``PurificationTrace.to_csv``.
    """
    rows = list(csv.DictReader(io.StringIO(trace_csv)))
    steps = np.array([int(r["step"]) for r in rows])
    col = {k: np.array([float(r[k]) for r in rows])
           for k in ("d1_norm_mean", "d2_norm_mean", "shift_norm_mean")}
    iteration = np.array([int(r["iteration"]) for r in rows])
    with plt.rc_context(REPORT_RC):
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(4.5, 3.6), sharex=True)
        a1.plot(steps, col["d1_norm_mean"], label="|d1|")
        a1.plot(steps, col["d2_norm_mean"], label="|d2|")
        a1.set_ylabel("guidance norm")
        a1.legend(frameon=False)
        a2.plot(steps, col["shift_norm_mean"], color="k")
        a2.set_ylabel("mean shift")
        a2.set_xlabel("reverse step")
        for s in steps[1:][np.diff(iteration) != 0]:
            a2.axvline(s - 0.5, color="0.8", lw=0.8)
        return _save(fig, path)


def accuracy_curves(record, path) -> Path:
    with plt.rc_context(REPORT_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for arm, m in sorted(record.arms.items()):
            if "accuracy_curve" in m:
                ax.plot(m["accuracy_curve"], label=arm, color=ARM_COLORS.get(arm))
        ax.set_xlabel("epoch")
        ax.set_ylabel("clean-test accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def image_grid(images: np.ndarray, path, ncols: int = 8) -> Path:
    images = np.asarray(images)
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.8, nrows * 0.8))
    for ax in np.atleast_1d(axes).flat:
        ax.axis("off")
    for ax, im in zip(np.atleast_1d(axes).flat, images):
        ax.imshow(np.clip(im.transpose(1, 2, 0), 0, 1), interpolation="nearest")
    return _save(fig, path)
