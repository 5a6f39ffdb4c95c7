"""Prior-flow oracle: the stand-in for a pretrained flow/matching network.

The oracle produces the flow a good matcher would output between the input
view's real image and a render from a sampled camera. Because the synthetic
scenes carry exact geometry, that flow is computed from ground-truth depth:

- ground_truth: flow from the view's GT depth to the sampled camera;
- noisy: same, plus i.i.d. per-pixel Gaussian noise of std `noise_std` px on
  both components, keyed by (seed, iteration, view_id) so reruns match;
- file: loads a .flo produced externally; the path pattern receives
  {view_id} and {iteration} via str.format.

With occlusion_aware set, pixels whose GT forward/backward flow composition
misses by more than 0.5 px are invalidated (a matcher cannot match what the
sampled view does not see).

The output never depends on Gaussian parameters; callers may treat it as a
constant during backpropagation (the losses detach it again regardless).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError
from .flow import FlowField, radiance_flow, read_flo, roundtrip_displacement
from .geometry import Camera
from .sampling import rng_stream

__all__ = ["OracleConfig", "prior_flow"]

OCCLUSION_TOL = 0.5


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "noisy"
    noise_std: float = 0.5
    path_pattern: str | None = None
    occlusion_aware: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("ground_truth", "noisy", "file"):
            raise ValueError(f"oracle kind must be ground_truth/noisy/file, got {self.kind!r}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.kind == "file" and not self.path_pattern:
            raise ValueError("file oracle requires a path_pattern")


def prior_flow(
    oracle: OracleConfig,
    scene,
    view_id: int,
    sampled_cam: Camera,
    *,
    seed: int = 0,
    iteration: int = 0,
) -> FlowField:
    """Prior flow from input view `view_id` to the sampled camera.

    `scene` must expose gt_depth(view_id), camera(view_id) and, for the
    occlusion check, trace_depth(cam). Raises MissingGroundTruthError through
    the scene accessors when assets are absent.
    """
    cam_i = scene.camera(view_id)
    if oracle.kind == "file":
        path = oracle.path_pattern.format(view_id=view_id, iteration=iteration)
        field = read_flo(path)
        if field.shape != (cam_i.height, cam_i.width):
            raise ShapeMismatchError(
                f"{path}: flow is {field.shape}, camera image is {cam_i.height}x{cam_i.width}"
            )
    else:
        gt_depth = scene.gt_depth(view_id)
        with torch.no_grad():
            field = radiance_flow(gt_depth, cam_i, sampled_cam)
        if oracle.kind == "noisy" and oracle.noise_std > 0:
            rng = rng_stream(seed, "oracle", iteration, view_id)
            noise = rng.normal(0.0, oracle.noise_std, size=(cam_i.height, cam_i.width, 2))
            field = FlowField(
                field.du + torch.from_numpy(noise[:, :, 0]),
                field.dv + torch.from_numpy(noise[:, :, 1]),
                field.valid,
            )

    if oracle.occlusion_aware:
        gt_depth = scene.gt_depth(view_id)
        with torch.no_grad():
            fwd = radiance_flow(gt_depth, cam_i, sampled_cam)
            depth_s = scene.trace_depth(sampled_cam)
            bwd = radiance_flow(depth_s, sampled_cam, cam_i)
        disp, ok = roundtrip_displacement(fwd, bwd)
        visible = ok & (disp <= OCCLUSION_TOL)
        field = FlowField(field.du, field.dv, field.valid & torch.from_numpy(visible))

    return field.detach()
