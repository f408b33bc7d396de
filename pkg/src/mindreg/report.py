"""Report rendering: delimited metrics plus matplotlib figures.

Every writer here is deterministic: fixed figure sizes and dpi, no
timestamps, and savefig metadata stripped of the library version stamp, so
re-rendering the same inputs produces byte-identical files.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bspline import jacobian_determinant

DPI = 120
# matplotlib writes a "Software: Matplotlib <version>" PNG chunk by default
_PNG_META = {"metadata": {"Software": None}}


def write_metrics_csv(rows, path) -> None:
    """Write (metric, key, value) rows as CSV with a fixed header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "key", "value"])
        for metric, key, value in rows:
            writer.writerow([metric, key, value])


def _central_slice(data: np.ndarray) -> np.ndarray:
    # axial slice at the z midpoint, x horizontal / y vertical
    return np.asarray(data)[:, :, data.shape[2] // 2].T


def save_slice_panel(fixed, moving, warped, path) -> None:
    """Central-slice panel: fixed, moving, warped moving, |fixed - warped|."""
    panels = [
        ("fixed", _central_slice(fixed.data)),
        ("moving", _central_slice(moving.data)),
        ("warped moving", _central_slice(warped.data)),
        ("|fixed - warped|", np.abs(_central_slice(fixed.data) - _central_slice(warped.data))),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img, cmap="gray", origin="lower", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, **_PNG_META)
    plt.close(fig)


def save_jacobian_map(field, path) -> None:
    """Central slice of the Jacobian determinant, diverging around 1."""
    dets = jacobian_determinant(field)
    img = _central_slice(dets.data)
    fig, ax = plt.subplots(figsize=(4.4, 3.6))
    im = ax.imshow(img, cmap="RdBu_r", origin="lower", vmin=0.0, vmax=2.0,
                   interpolation="nearest")
    ax.set_title("Jacobian determinant (central slice)", fontsize=9)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, **_PNG_META)
    plt.close(fig)


def save_loss_curves(history, level_spans, path) -> None:
    """Total and weighted term values per iteration, levels shaded."""
    iterations = np.arange(len(history))
    keys = sorted({k for report in history for k in report.weighted})
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for start, end in level_spans[::2]:
        ax.axvspan(start, end - 1, color="0.92", zorder=0)
    ax.plot(iterations, [r.total for r in history], color="black", label="total")
    for key in keys:
        ax.plot(iterations, [r.weighted.get(key, 0.0) for r in history],
                linewidth=0.9, label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, **_PNG_META)
    plt.close(fig)


def render_registration_report(
    out_dir,
    metrics_rows=None,
    fixed=None,
    moving=None,
    warped=None,
    field=None,
    history=None,
    level_spans=(),
):
    """Write whatever report pieces the given inputs allow.

    Returns the list of written file paths. Pieces: metrics.csv from
    metrics_rows, slices.png from (fixed, moving, warped), jacobian.png
    from field, loss_curves.png from a non-empty history.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if metrics_rows is not None:
        target = os.path.join(out_dir, "metrics.csv")
        write_metrics_csv(metrics_rows, target)
        written.append(target)
    if fixed is not None and moving is not None and warped is not None:
        target = os.path.join(out_dir, "slices.png")
        save_slice_panel(fixed, moving, warped, target)
        written.append(target)
    if field is not None:
        target = os.path.join(out_dir, "jacobian.png")
        save_jacobian_map(field, target)
        written.append(target)
    if history:
        target = os.path.join(out_dir, "loss_curves.png")
        save_loss_curves(history, level_spans, target)
        written.append(target)
    return written
