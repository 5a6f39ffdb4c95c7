"""Photometric and flow-supervision losses.

The photometric objective is the usual splatting mix

    (1 - lambda_dssim) * L1 + lambda_dssim * (1 - SSIM) / 2

with an 11x11 Gaussian window (sigma 1.5) SSIM on [0,1] images. The SSIM
kernel here is the single source of truth; the metrics module reuses it.

The flow-supervision loss compares the flow induced by rendered depth against
a prior flow treated as a constant:

    L_fds = mean over jointly valid pixels of || F_prior - F ||_2

The prior is detached inside the loss, so gradients reach only the rendered
flow. Pixels with residual norm below 1e-8 use subgradient 0. When the joint
validity set is empty the loss is 0 with a warning flag instead of an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError
from .flow import FlowField

__all__ = [
    "FdsLoss",
    "LossWeights",
    "fds_loss",
    "fds_loss_term",
    "photometric_loss",
    "photometric_terms",
    "ssim",
    "ssim_map",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FDS_NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Total-loss weights: (1 - lambda_dssim) L1 + lambda_dssim DSSIM
    + lambda_normal * 0 + lambda_fds * L_fds. The normal-consistency term is
    accepted but fixed at zero in this artifact."""

    lambda_dssim: float = 0.2
    lambda_normal: float = 0.0
    lambda_fds: float = 0.015

    def __post_init__(self) -> None:
        for name in ("lambda_dssim", "lambda_normal", "lambda_fds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def _window_vector(dtype) -> torch.Tensor:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


_BAND_CACHE: dict[tuple[int, torch.dtype], torch.Tensor] = {}


def _band(n: int, dtype: torch.dtype) -> torch.Tensor:
    """(n, n - 10) banded matrix so that band.T @ x is the valid correlation
    of x with the window along that axis. The 2D window is separable, so two
    matmuls replace a 2D convolution; on CPU this is a fast GEMM even in
    float64, where conv2d falls back to a slow path."""
    key = (n, dtype)
    band = _BAND_CACHE.get(key)
    if band is None:
        g = _window_vector(dtype)
        out = n - SSIM_WINDOW + 1
        band = torch.zeros((n, out), dtype=dtype)
        cols = torch.arange(out)
        for i in range(SSIM_WINDOW):
            band[cols + i, cols] = g[i]
        _BAND_CACHE[key] = band
    return band


def _filter(x: torch.Tensor) -> torch.Tensor:
    """Valid (crop) window filtering of (..., H, W) maps."""
    band_h = _band(x.shape[-2], x.dtype)
    band_w = _band(x.shape[-1], x.dtype)
    return torch.matmul(torch.matmul(band_h.T, x), band_w)


def _as_image_batch(img: torch.Tensor) -> torch.Tensor:
    """(H, W) or (H, W, C) to (1, C, H, W)."""
    if img.dim() == 2:
        return img.unsqueeze(0).unsqueeze(0)
    if img.dim() == 3:
        return img.permute(2, 0, 1).unsqueeze(0)
    raise ShapeMismatchError(f"expected (H, W) or (H, W, C) image, got {tuple(img.shape)}")


def ssim_map(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-position, per-channel SSIM map with valid (crop) convolution.

    Output shape (C, H - 10, W - 10); both images must be at least 11x11.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    a = _as_image_batch(pred)
    b = _as_image_batch(gt.to(pred.dtype) if isinstance(gt, torch.Tensor) else torch.as_tensor(gt, dtype=pred.dtype))
    if a.shape[2] < SSIM_WINDOW or a.shape[3] < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"image {a.shape[2]}x{a.shape[3]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    stacked = torch.cat([a, b, a * a, b * b, a * b], dim=0)
    mu_a, mu_b, m_aa, m_bb, m_ab = _filter(stacked).unbind(0)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(pred, gt) -> float:
    """Scalar SSIM index (mean of ssim_map); accepts numpy or torch images."""
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    gt_t = gt if isinstance(gt, torch.Tensor) else torch.as_tensor(np.asarray(gt, dtype=np.float64))
    with torch.no_grad():
        return float(ssim_map(pred_t, gt_t).mean())


def photometric_terms(pred: torch.Tensor, gt) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (L1, DSSIM) pair for a rendered color image."""
    gt_t = gt if isinstance(gt, torch.Tensor) else torch.as_tensor(np.asarray(gt), dtype=pred.dtype)
    if pred.shape != gt_t.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt_t.shape)}")
    l1 = (pred - gt_t).abs().mean()
    dssim = (1.0 - ssim_map(pred, gt_t).mean()) / 2.0
    return l1, dssim


def photometric_loss(render, gt, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - lambda) L1 + lambda DSSIM and its gradient with respect to the
    color image. `render` is a RenderOutput or a color tensor/array."""
    color = getattr(render, "color", render)
    color = color if isinstance(color, torch.Tensor) else torch.as_tensor(np.asarray(color, dtype=np.float64))
    leaf = color.detach().clone().requires_grad_(True)
    l1, dssim = photometric_terms(leaf, gt)
    loss = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    loss.backward()
    return loss.item(), leaf.grad.detach().numpy().copy()


def fds_loss_term(prior: FlowField, radiance: FlowField) -> tuple[torch.Tensor, int, bool]:
    """Differentiable flow-supervision loss.

    Returns (loss tensor on radiance's graph, joint valid count, no-valid
    flag). The prior is detached; the loss is the mean per-pixel residual
    norm over jointly valid pixels, 0 when that set is empty.
    """
    if prior.shape != radiance.shape:
        raise ShapeMismatchError(f"flow shapes differ: {prior.shape} vs {radiance.shape}")
    joint = prior.valid & radiance.valid
    count = int(joint.sum())
    if count == 0:
        return radiance.du.sum() * 0.0, 0, True
    ru = prior.du.detach().to(radiance.du.dtype) - radiance.du
    rv = prior.dv.detach().to(radiance.dv.dtype) - radiance.dv
    sq = ru * ru + rv * rv
    # Double-where keeps the subgradient exactly 0 where the norm vanishes.
    small = sq < FDS_NORM_EPS ** 2
    safe = torch.where(small, torch.ones_like(sq), sq)
    norm = torch.where(small, torch.zeros_like(sq), torch.sqrt(safe))
    loss = torch.where(joint, norm, torch.zeros_like(norm)).sum() / count
    return loss, count, False


@dataclass
class FdsLoss:
    loss: float
    grad_du: np.ndarray
    grad_dv: np.ndarray
    valid_count: int
    no_valid: bool


def fds_loss(prior: FlowField, radiance: FlowField) -> FdsLoss:
    """Loss plus the analytic gradient with respect to the radiance flow.

    Per valid pixel with residual norm >= 1e-8 the gradient is
    -(F_prior - F) / ||F_prior - F|| / count; elsewhere 0.
    """
    if prior.shape != radiance.shape:
        raise ShapeMismatchError(f"flow shapes differ: {prior.shape} vs {radiance.shape}")
    joint = (prior.valid & radiance.valid).numpy()
    h, w = prior.shape
    if not joint.any():
        return FdsLoss(0.0, np.zeros((h, w)), np.zeros((h, w)), 0, True)
    ru = prior.du.detach().numpy().astype(np.float64) - radiance.du.detach().numpy().astype(np.float64)
    rv = prior.dv.detach().numpy().astype(np.float64) - radiance.dv.detach().numpy().astype(np.float64)
    norm = np.hypot(ru, rv)
    count = int(joint.sum())
    loss = float(norm[joint].mean())
    live = joint & (norm >= FDS_NORM_EPS)
    safe = np.where(live, norm, 1.0)
    grad_du = np.where(live, -ru / safe / count, 0.0)
    grad_dv = np.where(live, -rv / safe / count, 0.0)
    return FdsLoss(loss, grad_du, grad_dv, count, False)
