"""Sampling of unobserved views around an input camera.

The sampled camera keeps the input orientation and moves by a translation
drawn on a circle of radius eps_t in the input camera's image plane:

    t = (eps_t * sin(2 pi xi), eps_t * cos(2 pi xi), 0),   xi ~ U[0, 1)

with eps_t = sigma * mean_depth / f, f = (fx + fy) / 2. The radius adapts to
scene depth so the mean induced flow magnitude stays near sigma pixels
regardless of scale. The relative transform input -> sampled is exactly this
pure translation expressed in the input camera frame.

All randomness in the package flows through `rng_stream`: a counter-based
Philox generator keyed by the SHA-256 of (seed, purpose tags), so every
consumer owns an isolated, reproducible stream.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepthError
from .geometry import Camera, RigidTransform

__all__ = [
    "SampledView",
    "SamplerConfig",
    "adaptive_radius",
    "mean_rendered_depth",
    "rng_stream",
    "sample_translation",
    "sample_view",
]

MEAN_DEPTH_FLOOR = 1e-3
ALPHA_COVERED = 1e-4


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent deterministic generator for (seed, purpose-tag) tuples."""
    msg = ":".join([str(int(seed)), *map(str, tags)]).encode()
    key = np.frombuffer(hashlib.sha256(msg).digest()[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SamplerConfig:
    """View-sampling knobs: target flow magnitude sigma (pixels), mode
    ("random" draws xi per call, "fixed" always uses xi0), and the seed that
    names the xi stream."""

    sigma: float = 23.0
    mode: str = "random"
    xi0: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.mode not in ("random", "fixed"):
            raise ValueError(f"mode must be 'random' or 'fixed', got {self.mode!r}")
        if not 0.0 <= self.xi0 < 1.0:
            raise ValueError(f"xi0 must lie in [0, 1), got {self.xi0}")


@dataclass(frozen=True)
class SampledView:
    camera: Camera
    xi: float
    eps_t: float
    t: np.ndarray


def adaptive_radius(mean_depth: float, cam: Camera, sigma: float) -> float:
    """Translation radius sigma * mean_depth / mean focal length.

    Raises NonPositiveDepthError for mean_depth <= 0. Depths below 1e-3
    (collapsed scene) are clamped to 1e-3 so the sampled view stays distinct.
    """
    if not mean_depth > 0:
        raise NonPositiveDepthError(f"mean depth {mean_depth:g} <= 0")
    return sigma * max(float(mean_depth), MEAN_DEPTH_FLOOR) / cam.mean_focal


def sample_translation(eps_t: float, xi: float) -> np.ndarray:
    """Point on the radius-eps_t circle in the camera's image plane; t3 = 0."""
    if eps_t < 0:
        raise ValueError(f"eps_t must be >= 0, got {eps_t}")
    angle = 2.0 * math.pi * xi
    return np.array([eps_t * math.sin(angle), eps_t * math.cos(angle), 0.0])


def sample_view(
    input_cam: Camera, mean_depth: float, cfg: SamplerConfig, rng: np.random.Generator
) -> SampledView:
    """Sample a camera displaced from input_cam; intrinsics are unchanged.

    In random mode xi comes from the supplied generator (exactly one draw);
    in fixed mode the generator is not consulted.
    """
    xi = float(cfg.xi0) if cfg.mode == "fixed" else float(rng.random())
    eps_t = adaptive_radius(mean_depth, input_cam, cfg.sigma)
    t = sample_translation(eps_t, xi)
    pose = RigidTransform(input_cam.pose.rotation, input_cam.pose.translation + t)
    return SampledView(camera=input_cam.with_pose(pose), xi=xi, eps_t=eps_t, t=t)


def mean_rendered_depth(depth: np.ndarray, alpha_acc: np.ndarray) -> float:
    """Mean depth over covered pixels (alpha_acc > 1e-4).

    Returns the 1e-3 degenerate floor when nothing is covered, which makes
    adaptive_radius fall back to its clamped radius.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(alpha_acc) > ALPHA_COVERED
    if not mask.any():
        return MEAN_DEPTH_FLOOR
    return float(depth[mask].mean())
