"""Figure rendering for training runs and evaluation reports.

Figures are written as PNG files next to the line-delimited outputs
they illustrate: loss curves from a run log, a metric summary chart
from an evaluation report, and qualitative caption/mask overlays.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import Sample, box_to_px, render_scene
from .errors import InputError
from .metrics import EvalReport
from .model import Candidate, ShapeCapModel

# one fixed, colorblind-friendly cycle shared by every overlay so the
# k-th mask always gets the k-th color
MASK_COLORS = (
    (230, 60, 60),
    (60, 120, 230),
    (60, 180, 90),
    (240, 180, 40),
    (170, 70, 200),
    (80, 200, 220),
)

__all__ = [
    "MASK_COLORS",
    "metric_bars",
    "overlay_candidate",
    "qualitative_grid",
    "training_curves",
]


def _read_run_log(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise InputError(f"run log {path!r} is empty")
    return records


def training_curves(run_log_path: str, out_path: str) -> str:
    """Plot per-epoch loss components for both splits; returns out_path."""
    records = _read_run_log(run_log_path)
    components = sorted({key for r in records for key in r["losses"]})
    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharex=True)
    for ax, split in zip(axes, ("train", "val")):
        rows = [r for r in records if r["split"] == split]
        for name in components:
            xs = [r["epoch"] for r in rows if name in r["losses"]]
            ys = [r["losses"][name] for r in rows if name in r["losses"]]
            if xs:
                ax.plot(xs, ys, marker=".", label=name)
        joint_epochs = [r["epoch"] for r in rows if r["stage"] == "joint"]
        if joint_epochs and any(r["stage"] == "caption" for r in rows):
            ax.axvline(min(joint_epochs) - 0.5, color="gray", linestyle="--", linewidth=1)
        ax.set_title(f"{split} losses")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.grid(True, alpha=0.3)
    axes[0].set_ylabel("loss")
    axes[1].legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def metric_bars(report: EvalReport, out_path: str) -> str:
    """Bar chart of the headline metrics; returns out_path."""
    fig, (left, right) = plt.subplots(
        1, 2, figsize=(8, 3.5), gridspec_kw={"width_ratios": [4, 1]}
    )
    names = ["BLEU-4", "mIoU", "mAP@0.5", "exact"]
    values = [report.bleu4, report.miou, report.map, report.exact_match]
    bars = left.bar(names, values, color="#4878cf")
    left.set_ylim(0, 1.05)
    left.bar_label(bars, fmt="%.3f", fontsize=8)
    left.set_title(f"scores over {report.n_samples} samples")
    cbar = right.bar(["CIDEr"], [report.cider], color="#6acc65")
    right.set_ylim(0, 10.5)
    right.bar_label(cbar, fmt="%.2f", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def overlay_candidate(image: np.ndarray, candidate: Candidate, alpha: float = 0.45) -> np.ndarray:
    """Blend candidate masks over an RGB image, one fixed color per slot."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError("overlay expects an (H, W, 3) image")
    out = image.astype(np.float64)
    for slot, mask in enumerate(candidate.masks):
        color = np.array(MASK_COLORS[slot % len(MASK_COLORS)], dtype=np.float64)
        region = mask.astype(bool)
        out[region] = (1.0 - alpha) * out[region] + alpha * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def qualitative_grid(
    model: ShapeCapModel,
    samples: list[Sample],
    out_path: str,
    n: int = 4,
    k: int = 3,
    steps: int | None = None,
    seed: int = 0,
) -> str:
    """Render top-candidate overlays for the first ``n`` samples."""
    if not samples:
        raise InputError("qualitative_grid needs at least one sample")
    chosen = samples[:n]
    fig, axes = plt.subplots(1, len(chosen), figsize=(3.2 * len(chosen), 3.8))
    if len(chosen) == 1:
        axes = [axes]
    for i, (ax, sample) in enumerate(zip(axes, chosen)):
        image = render_scene(sample.scene)
        center = sample.scene.objects[sample.caption.center_object]
        box = box_to_px(center.box, image.shape[:2])
        generator = torch.Generator().manual_seed(seed * 1_000_003 + i)
        candidates = model.infer(image, box, k=k, generator=generator, steps=steps)
        top = candidates[0]
        ax.imshow(overlay_candidate(image, top))
        x0, y0, x1, y1 = box
        ax.add_patch(
            plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                          fill=False, edgecolor="black", linewidth=1.5)
        )
        ax.set_title("\n".join(_wrap_words(top.caption, 22)), fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _wrap_words(text: str, width: int) -> list[str]:
    lines: list[str] = []
    current = ""
    for word in text.split():
        if current and len(current) + 1 + len(word) > width:
            lines.append(current)
            current = word
        else:
            current = f"{current} {word}".strip()
    if current:
        lines.append(current)
    return lines or [""]
