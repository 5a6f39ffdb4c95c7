"""Evaluation metrics: Abs Rel depth error, PSNR, SSIM.

Abs Rel is scale-sensitive by construction (abs_rel(k * gt, gt) = |k - 1|),
which is exactly what makes flow supervision measurable: photometric-only
training can leave geometry at a wrong depth while rendering the right
colors. SSIM reuses the loss module's kernel so the metric and the training
objective can never drift apart.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import NoValidPixelsError, ShapeMismatchError
from .gaussians import GaussianCloud, render_forward
from .losses import ssim

__all__ = ["EvalReport", "ViewMetrics", "abs_rel", "evaluate", "psnr", "ssim", "write_report"]

PSNR_SENTINEL = 99.0
ALPHA_VALID = 1e-4


def abs_rel(pred_depth: np.ndarray, gt_depth: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean |d - d*| / d* over valid pixels. GT must be positive there."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeMismatchError(f"shapes differ: {pred.shape}, {gt.shape}, {mask.shape}")
    if not mask.any():
        raise NoValidPixelsError("abs_rel has no valid pixels")
    if not (gt[mask] > 0).all():
        raise ValueError("gt depth must be positive on valid pixels")
    return float((np.abs(pred[mask] - gt[mask]) / gt[mask]).mean())


def psnr(pred_image: np.ndarray, gt_image: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] images; 99.0 sentinel when MSE < 1e-12."""
    pred = np.asarray(pred_image, dtype=np.float64)
    gt = np.asarray(gt_image, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(((pred - gt) ** 2).mean())
    if mse < 1e-12:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class ViewMetrics:
    view_id: int
    abs_rel: float
    psnr: float
    ssim: float
    valid_px: int


@dataclass
class EvalReport:
    split: str
    views: list[ViewMetrics]
    mean_abs_rel: float
    mean_psnr: float
    mean_ssim: float


def evaluate(cloud: GaussianCloud, scene, split: str = "test", background_depth: float | None = None) -> EvalReport:
    """Render every view of a split and score it against ground truth.

    Depth validity is GT-finite and rendered alpha_acc > 1e-4.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    views = scene.train_views if split == "train" else scene.test_views
    if not views:
        raise ValueError(f"scene has no {split!r} views")
    bg = scene.far if background_depth is None else background_depth

    rows = []
    for view in views:
        with torch.no_grad():
            out = render_forward(cloud, view.camera, background_depth=bg)
        depth = out.depth.numpy()
        color = out.color.numpy()
        alpha = out.alpha_acc.numpy()
        valid = np.isfinite(view.depth) & (alpha > ALPHA_VALID)
        rows.append(
            ViewMetrics(
                view_id=view.view_id,
                abs_rel=abs_rel(depth, view.depth, valid),
                psnr=psnr(color, view.color),
                ssim=ssim(color, view.color),
                valid_px=int(valid.sum()),
            )
        )
    return EvalReport(
        split=split,
        views=rows,
        mean_abs_rel=float(np.mean([r.abs_rel for r in rows])),
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
    )


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """Persist an EvalReport as report.csv (per-view + mean row) and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["view_id,abs_rel,psnr,ssim,valid_px"]
    for r in report.views:
        lines.append(f"{r.view_id},{r.abs_rel:.12g},{r.psnr:.12g},{r.ssim:.12g},{r.valid_px}")
    lines.append(f"mean,{report.mean_abs_rel:.12g},{report.mean_psnr:.12g},{report.mean_ssim:.12g},")
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    with open(out / "report.json", "w") as f:
        json.dump(asdict(report), f, indent=1)
        f.write("\n")
