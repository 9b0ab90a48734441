"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    # fixed hash salt so the SVG/PNG bytes do not depend on the process
    "svg.hashsalt": "rpnet",
}
LEVEL_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(history, path) -> Path:
    """Iteration loss (log scale) and per-level validation mIoU per epoch."""
    iters = [r for r in history if r["kind"] == "iter"]
    epochs = [r for r in history if r["kind"] == "epoch"]
    with plt.rc_context(RC):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.2))
        if iters:
            ax_l.plot([r["iteration"] for r in iters], [r["loss"] for r in iters], color="0.35")
            ax_l.set_yscale("log")
            for stage in sorted({r["stage"] for r in iters})[1:]:
                start = next(r["iteration"] for r in iters if r["stage"] == stage)
                ax_l.axvline(start, color="0.7", ls="--", lw=0.8)
        ax_l.set_xlabel("iteration")
        ax_l.set_ylabel("stage loss")
        levels = sorted({k for r in epochs for k in r["miou"]}, key=int)
        for i, lvl in enumerate(levels):
            pts = [(r["iteration"], r["miou"][lvl]) for r in epochs if lvl in r["miou"]]
            ax_m.plot(*zip(*pts), marker=".", ms=3, color=LEVEL_COLORS[i % 4], label=f"level {lvl}")
        ax_m.set_xlabel("iteration")
        ax_m.set_ylabel("validation mIoU")
        ax_m.set_ylim(0, 1)
        if levels:
            ax_m.legend(loc="lower right")
        return _save(fig, path)


def iou_bars(results, class_names, path) -> Path:
    """Grouped per-class IoU bars, one group member per evaluated level."""
    keys = list(results)
    x = np.arange(len(class_names))
    width = 0.8 / max(1, len(keys))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.55 * len(class_names) + 1.5), 3.2))
        for i, key in enumerate(keys):
            vals = np.nan_to_num(np.asarray(results[key].per_class, dtype=float))
            ax.bar(x + (i - (len(keys) - 1) / 2) * width, vals, width,
                   color=LEVEL_COLORS[i % 4], label=f"{key} (mIoU {results[key].mean:.3f})")
        ax.set_xticks(x)
        ax.set_xticklabels(class_names, rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("IoU")
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0))
        return _save(fig, path)


def latency_chart(reports, path) -> Path:
    """Frames per second against input size for every profiled model."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for i, rep in enumerate(reports):
            rows = [r for r in rep.latency if r.mean_ms is not None]
            if not rows:
                continue
            ax.plot([r.label for r in rows], [r.fps for r in rows], marker="o",
                    color=LEVEL_COLORS[i % 4], label=rep.name)
        ax.set_xlabel("input size (W x H)")
        ax.set_ylabel("frames per second")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def pyramid_panel(image, level_preds, final_pred, palette, path, gt=None) -> Path:
    """Input, each level's prediction at its native scale, the final map and the label."""
    lut = np.asarray(palette, dtype=np.uint8)

    def colorize(pred):
        pred = np.asarray(pred)
        out = np.zeros(pred.shape + (3,), dtype=np.uint8)
        valid = (pred >= 0) & (pred < len(lut))
        out[valid] = lut[pred[valid]]
        return out

    panels = [("input", np.asarray(image).transpose(1, 2, 0))]
    panels += [(f"level {i}", colorize(p)) for i, p in enumerate(level_preds, start=1)]
    panels.append(("final", colorize(final_pred)))
    if gt is not None:
        panels.append(("label", colorize(gt)))
    with plt.rc_context({**RC, "axes.grid": False}):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.2))
        for ax, (title, arr) in zip(np.atleast_1d(axes), panels):
            ax.imshow(np.clip(arr, 0, 1) if arr.dtype != np.uint8 else arr, interpolation="nearest")
            ax.set_title(title)
            ax.set_axis_off()
        return _save(fig, path)
