"""Report emission: aggregated metric tables (CSV + aligned text + a bar-chart
figure) and qualitative side-by-side overlay renderings."""

import csv
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import metrics
from .errors import DataError

GT_COLOR = (0.0, 0.9, 0.2)      # green
PRED_COLOR = (1.0, 0.15, 0.15)  # red
OVERLAY_ALPHA = 0.45


def best_val_record(run_dir):
    """Best-by-IoU validation row of a run's log.csv (matches ckpt_best selection)."""
    path = Path(run_dir) / "log.csv"
    if not path.is_file():
        raise DataError(f"missing training log: {path}")
    best = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("val_iou"):
                rec = {name: float(row[f"val_{name}"]) for name in metrics.METRIC_NAMES}
                if best is None or rec["iou"] > best["iou"]:
                    best = rec
    if best is None:
        raise DataError(f"no validation rows found in {path}")
    return best


def write_report(groups, out_dir):
    """Aggregate per-group repeat records and emit report.csv/.txt/.png.

    groups: list of (label, [record dict per repeat]).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(label, metrics.aggregate(records)) for label, records in groups]

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["method"]
        for name in metrics.METRIC_NAMES:
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)
        for label, agg in rows:
            line = [label]
            for name in metrics.METRIC_NAMES:
                line += [f"{agg[name][0]:.6f}", f"{agg[name][1]:.6f}"]
            writer.writerow(line)

    txt_path = out / "report.txt"
    txt_path.write_text(metrics.format_table(rows) + "\n")

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(rows), 1)
    xs = np.arange(len(metrics.METRIC_NAMES))
    for i, (label, agg) in enumerate(rows):
        means = [agg[n][0] * 100 for n in metrics.METRIC_NAMES]
        stds = [agg[n][1] * 100 for n in metrics.METRIC_NAMES]
        ax.bar(xs + i * width, means, width, yerr=stds, capsize=3, label=label)
    ax.set_xticks(xs + width * (len(rows) - 1) / 2)
    ax.set_xticklabels([n.upper() if n == "iou" else n.capitalize() for n in metrics.METRIC_NAMES])
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title("validation metrics (mean ± stdev over runs)")
    fig.tight_layout()
    fig.savefig(out / "report.png", dpi=120)
    plt.close(fig)
    return csv_path, txt_path, out / "report.png"


def _blend(base, mask, color):
    out = base.copy()
    m = mask.astype(bool)
    for ch in range(3):
        out[..., ch][m] = (1 - OVERLAY_ALPHA) * base[..., ch][m] + OVERLAY_ALPHA * color[ch]
    return out


def overlay_image(image, gt_mask, pred_mask):
    """Three panels side by side: input | ground truth | prediction.

    Output width is exactly 3x the input width.
    """
    base = np.stack([image, image, image], axis=-1)
    gt = _blend(base, gt_mask, GT_COLOR)
    pred = _blend(base, pred_mask, PRED_COLOR)
    strip = np.concatenate([base, gt, pred], axis=1)
    return np.round(np.clip(strip, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_overlays(model, samples, out_dir, threshold=0.5):
    """One overlay PNG per sample plus a legend file documenting the coding."""
    import torch

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    written = []
    with torch.no_grad():
        for s in samples:
            x = torch.from_numpy(s.image).float()[None, None]
            prob = torch.sigmoid(model(x, mode="eval").main_logits)[0, 0].numpy()
            pred = prob > threshold
            gt = s.mask if s.mask is not None else np.zeros_like(pred, dtype=np.uint8)
            strip = overlay_image(s.image, gt, pred)
            path = out / (s.id.replace("/", "__") + ".png")
            Image.fromarray(strip).save(path)
            written.append(path)
    (out / "render_legend.txt").write_text(
        "panel order: input | ground truth (green overlay) | prediction (red overlay)\n"
        f"overlay alpha {OVERLAY_ALPHA}; prediction threshold {threshold}\n")
    return written
