"""Optimizable 3D Gaussian cloud and a differentiable splatting renderer.

The renderer is exact per pixel over every Gaussian that survives a 3-sigma
bounding-box cull (no tile rasterizer): it projects each Gaussian with the
local-affine (EWA) approximation, sorts by camera-frame depth, and
alpha-composites front to back. Color is the usual splatting blend

    C(x) = sum_i c_i * ahat_i * prod_{j<i} (1 - ahat_j)

and depth is the normalized blend

    D(x) = sum_i d_i * w_i / sum_i w_i,     w_i = ahat_i * prod_{j<i} (1 - ahat_j)

where d_i is the camera-frame z of the Gaussian center. Everything runs in
torch so gradients for all parameters come from autograd; `render_backward`
exposes them through an explicit per-parameter gradient buffer.

Rasterization rules (fixed across the package):

- per-pixel opacity ahat = opacity * exp(-0.5 * d^T cov2d^{-1} d), clamped to
  at most 0.999; contributions with ahat < 1/255 are skipped;
- compositing stops once transmittance drops below 1e-4;
- a Gaussian is culled when its center has camera z <= 1e-8 (near guard) or
  its 3-sigma screen box misses the image;
- cov2d gets an isotropic floor of 0.3 px^2 on the diagonal;
- pixels whose accumulated weight stays below 1e-4 get background color
  (0, 0, 0) and the caller-provided background depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BadMagicError,
    BehindCameraError,
    EmptyCloudError,
    NumericalDivergenceError,
    ShapeMismatchError,
    StateMismatchError,
    TruncatedFileError,
    ZeroQuaternionError,
)
from .geometry import Camera, Pixel, quaternion_to_rotation

__all__ = [
    "CHECKPOINT_MAGIC",
    "GaussianCloud",
    "RenderAux",
    "RenderOutput",
    "build_covariance",
    "eval_gaussian",
    "load_checkpoint",
    "project_gaussian",
    "render_aux",
    "render_backward",
    "render_forward",
    "save_checkpoint",
]

COV2D_FLOOR = 0.3
ALPHA_CLAMP = 0.999
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4
ALPHA_BACKGROUND = 1e-4
NEAR_GUARD = 1e-8
_PAIR_BUDGET = 50_000_000

PARAM_NAMES = ("mu", "log_scale", "quat", "opacity_logit", "color_logit")


class GaussianCloud:
    """Structure-of-arrays Gaussian cloud in unconstrained parametrization.

    mu: (N, 3) world positions; log_scale: (N, 3); quat: (N, 4) as (w, x, y, z),
    normalized on decode; opacity_logit: (N,); color_logit: (N, 3). Decoded
    opacity/color are sigmoids, decoded scale is exp, so the optimizer is
    unconstrained while the decoded invariants hold automatically. The per
    parameter `.grad` buffers play the role of the gradient buffer.
    """

    def __init__(self, mu, log_scale, quat, opacity_logit, color_logit, dtype=torch.float64):
        def as_param(x):
            if isinstance(x, torch.Tensor):
                return x.detach().to(dtype).clone()
            return torch.tensor(np.asarray(x), dtype=dtype)

        self.mu = as_param(mu)
        self.log_scale = as_param(log_scale)
        self.quat = as_param(quat)
        self.opacity_logit = as_param(opacity_logit)
        self.color_logit = as_param(color_logit)
        n = self.mu.shape[0]
        expected = {
            "mu": (n, 3),
            "log_scale": (n, 3),
            "quat": (n, 4),
            "opacity_logit": (n,),
            "color_logit": (n, 3),
        }
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ShapeMismatchError(f"{name} has shape {got}, expected {shape}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def dtype(self):
        return self.mu.dtype

    def parameters(self) -> tuple[torch.Tensor, ...]:
        return tuple(getattr(self, name) for name in PARAM_NAMES)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.grad is not None:
                p.grad.zero_()

    def snapshot(self) -> "GaussianCloud":
        """Detached deep copy for evaluation while training continues."""
        return GaussianCloud(
            *(p.detach().numpy().copy() for p in self.parameters()), dtype=self.dtype
        )

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def colors(self) -> torch.Tensor:
        return torch.sigmoid(self.color_logit)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scale)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha_acc: torch.Tensor  # (H, W)


@dataclass
class RenderAux:
    """Detached rasterizer internals, for diagnostics and test fixtures.

    Per-Gaussian arrays are in depth-sorted order over the visible subset;
    `order` maps back to original cloud indices. Pair arrays enumerate the
    (gaussian, pixel) lattice the compositor actually visited; `ahat_raw` is
    the per-pair opacity before the 0.999 clamp and the 1/255 skip.
    """

    order: np.ndarray  # (M,) original indices, depth ascending
    z: np.ndarray  # (M,)
    center2d: np.ndarray  # (M, 2)
    radii: np.ndarray  # (M, 2) 3-sigma screen extents
    inv_cov: np.ndarray  # (M, 3) upper-triangle of cov2d^{-1}
    opacity: np.ndarray  # (M,)
    pair_gaussian: np.ndarray  # (P,) index into sorted arrays
    pair_pixel: np.ndarray  # (P,) flat pixel index v * W + u
    ahat_raw: np.ndarray  # (P,)
    ahat: np.ndarray  # (P,)
    t_excl: np.ndarray  # (P,)
    alpha_acc: np.ndarray  # (H, W)


def _make_qq_to_rot() -> np.ndarray:
    """(16, 9) map from flattened q qT products to rotation-matrix entries.

    Rotation entries are linear in the products q_i q_j (w, x, y, z order),
    so one outer product and one matmul build every rotation at once.
    Symmetric products get half their coefficient on each of (i, j), (j, i).
    """
    m = np.zeros((16, 9))

    def put(i, j, row, col, coeff):
        if i == j:
            m[4 * i + j, 3 * row + col] += coeff
        else:
            m[4 * i + j, 3 * row + col] += coeff / 2.0
            m[4 * j + i, 3 * row + col] += coeff / 2.0

    w, x, y, z = 0, 1, 2, 3
    put(y, y, 0, 0, -2.0); put(z, z, 0, 0, -2.0)
    put(x, y, 0, 1, 2.0); put(w, z, 0, 1, -2.0)
    put(x, z, 0, 2, 2.0); put(w, y, 0, 2, 2.0)
    put(x, y, 1, 0, 2.0); put(w, z, 1, 0, 2.0)
    put(x, x, 1, 1, -2.0); put(z, z, 1, 1, -2.0)
    put(y, z, 1, 2, 2.0); put(w, x, 1, 2, -2.0)
    put(x, z, 2, 0, 2.0); put(w, y, 2, 0, -2.0)
    put(y, z, 2, 1, 2.0); put(w, x, 2, 1, 2.0)
    put(x, x, 2, 2, -2.0); put(y, y, 2, 2, -2.0)
    return m


_QQ_TO_ROT = torch.from_numpy(_make_qq_to_rot())
_ROT_CONST = torch.from_numpy(np.eye(3).reshape(9))


def _batch_rotations(quat: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z) to (N, 3, 3) rotations, differentiable."""
    norm = torch.linalg.vector_norm(quat, dim=1)
    if bool((norm.detach() < 1e-12).any()):
        raise ZeroQuaternionError("quaternion norm below 1e-12 in cloud")
    qn = quat / norm.unsqueeze(1)
    qq = (qn.unsqueeze(2) * qn.unsqueeze(1)).reshape(-1, 16)
    flat = qq @ _QQ_TO_ROT.to(quat.dtype) + _ROT_CONST.to(quat.dtype)
    return flat.view(-1, 3, 3)


def _enumerate_pairs(u0, u1, v0, v1):
    """Expand per-Gaussian integer pixel boxes into (gaussian, u, v) pairs.

    Boxes are inclusive and already clipped; empty boxes contribute nothing.
    Order: Gaussians in input (depth-sorted) order, pixels row-major inside
    each box.
    """
    bw = u1 - u0 + 1
    bh = v1 - v0 + 1
    area = np.where((bw > 0) & (bh > 0), bw * bh, 0).astype(np.int64)
    total = int(area.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    if total > _PAIR_BUDGET:
        raise NumericalDivergenceError(
            f"splat footprint exploded: {total} pixel pairs exceeds budget {_PAIR_BUDGET}"
        )
    pg = np.repeat(np.arange(area.shape[0], dtype=np.int64), area)
    start = np.cumsum(area) - area
    k = np.arange(total, dtype=np.int64) - start[pg]
    bwg = bw[pg]
    pu = u0[pg] + k % bwg
    pv = v0[pg] + k // bwg
    return pg, pu, pv


def _render(cloud: GaussianCloud, cam: Camera, background_depth: float, collect_aux: bool):
    if len(cloud) == 0:
        raise EmptyCloudError("render requires at least one Gaussian")
    dtype = cloud.dtype
    h, w_img = cam.height, cam.width
    n_px = h * w_img

    rot_wc = torch.tensor(cam.pose.rotation, dtype=dtype)
    t_wc = torch.tensor(cam.pose.translation, dtype=dtype)
    p_cam = cloud.mu @ rot_wc.T + t_wc
    z_all = p_cam[:, 2]

    vis_np = np.flatnonzero(z_all.detach().numpy() > NEAR_GUARD)

    def _background(aux_m=0):
        color = torch.zeros((h, w_img, 3), dtype=dtype)
        depth = torch.full((h, w_img), float(background_depth), dtype=dtype)
        alpha = torch.zeros((h, w_img), dtype=dtype)
        out = RenderOutput(color, depth, alpha)
        if not collect_aux:
            return out, None
        empty_i = np.empty(0, dtype=np.int64)
        empty_f = np.empty(0, dtype=np.float64)
        aux = RenderAux(
            order=empty_i, z=empty_f, center2d=np.empty((0, 2)), radii=np.empty((0, 2)),
            inv_cov=np.empty((0, 3)), opacity=empty_f, pair_gaussian=empty_i,
            pair_pixel=empty_i, ahat_raw=empty_f, ahat=empty_f, t_excl=empty_f,
            alpha_acc=np.zeros((h, w_img)),
        )
        return out, aux

    if vis_np.size == 0:
        return _background()

    # Depth sort over the visible subset, ties broken by original index.
    z_vis_np = z_all.detach().numpy()[vis_np]
    order_np = vis_np[np.argsort(z_vis_np, kind="stable")]
    idx = torch.from_numpy(order_np)

    pc = p_cam[idx]
    x, y, z = pc.unbind(dim=1)
    inv_z = 1.0 / z
    u = cam.fx * x * inv_z + cam.cx
    v = cam.fy * y * inv_z + cam.cy

    rot3 = _batch_rotations(cloud.quat[idx])
    scale = torch.exp(cloud.log_scale[idx])
    m3 = rot3 * scale.unsqueeze(1)
    cov3d = m3 @ m3.transpose(1, 2)

    zeros = torch.zeros_like(x)
    jrow0 = torch.stack([cam.fx * inv_z, zeros, -cam.fx * x * inv_z * inv_z], dim=1)
    jrow1 = torch.stack([zeros, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], dim=1)
    jw = torch.stack([jrow0, jrow1], dim=1) @ rot_wc
    cov2d = jw @ cov3d @ jw.transpose(1, 2)
    ca = cov2d[:, 0, 0] + COV2D_FLOOR
    cb = cov2d[:, 0, 1]
    cc = cov2d[:, 1, 1] + COV2D_FLOOR
    det = ca * cc - cb * cb
    inv_a = cc / det
    inv_b = -cb / det
    inv_c = ca / det

    # Integer 3-sigma boxes (no gradients involved).
    u_np = u.detach().numpy()
    v_np = v.detach().numpy()
    ru_np = 3.0 * np.sqrt(ca.detach().numpy())
    rv_np = 3.0 * np.sqrt(cc.detach().numpy())
    u0 = np.clip(np.ceil(u_np - ru_np), 0, w_img - 1).astype(np.int64)
    u1 = np.clip(np.floor(u_np + ru_np), 0, w_img - 1).astype(np.int64)
    v0 = np.clip(np.ceil(v_np - rv_np), 0, h - 1).astype(np.int64)
    v1 = np.clip(np.floor(v_np + rv_np), 0, h - 1).astype(np.int64)
    # A box that got clipped away entirely (center off-screen) must not wrap.
    off = (u_np + ru_np < 0) | (u_np - ru_np > w_img - 1) | (v_np + rv_np < 0) | (v_np - rv_np > h - 1)
    u1 = np.where(off, -1, u1)
    u0 = np.where(off, 0, u0)
    v1 = np.where(off, -1, v1)
    v0 = np.where(off, 0, v0)

    pg_np, pu_np, pv_np = _enumerate_pairs(u0, u1, v0, v1)
    if pg_np.size == 0:
        return _background()
    pix_np = pv_np * w_img + pu_np
    resort = np.argsort(pix_np, kind="stable")
    pg_np = pg_np[resort]
    pix_np = pix_np[resort]
    pu_np = pu_np[resort]
    pv_np = pv_np[resort]
    seg_first = np.empty(pix_np.shape[0], dtype=bool)
    seg_first[0] = True
    np.not_equal(pix_np[1:], pix_np[:-1], out=seg_first[1:])
    first_of_pair = np.flatnonzero(seg_first)[np.cumsum(seg_first) - 1]

    pg = torch.from_numpy(pg_np)
    pix = torch.from_numpy(pix_np)
    pu = torch.from_numpy(pu_np.astype(np.float64)).to(dtype)
    pv = torch.from_numpy(pv_np.astype(np.float64)).to(dtype)

    # One fused gather for all per-Gaussian scalars the pair stage needs.
    opacity = torch.sigmoid(cloud.opacity_logit[idx])
    per_g = torch.stack([u, v, inv_a, 2.0 * inv_b, inv_c, opacity, z], dim=1)
    g_u, g_v, g_ia, g_ib2, g_ic, g_op, g_z = per_g[pg].unbind(dim=1)

    dx = pu - g_u
    dy = pv - g_v
    maha = g_ia * dx * dx + g_ib2 * dx * dy + g_ic * dy * dy
    ahat_raw = g_op * torch.exp(-0.5 * maha)
    ahat = torch.clamp(ahat_raw, max=ALPHA_CLAMP)
    zero = ahat.new_zeros(())
    ahat = torch.where(ahat < ALPHA_SKIP, zero, ahat)

    # Exclusive per-pixel transmittance via segmented cumulative log(1 - ahat).
    log_t = torch.log1p(-ahat)
    csum = torch.cumsum(log_t, dim=0)
    c_excl = csum - log_t
    base = c_excl[torch.from_numpy(first_of_pair)]
    t_excl = torch.exp(c_excl - base)
    weight = torch.where(t_excl >= TRANSMITTANCE_STOP, ahat * t_excl, zero)

    colors = torch.sigmoid(cloud.color_logit[idx])
    color_flat = torch.zeros((n_px, 3), dtype=dtype).index_add(0, pix, weight.unsqueeze(1) * colors[pg])
    depth_num = torch.zeros(n_px, dtype=dtype).index_add(0, pix, weight * g_z)
    alpha_flat = torch.zeros(n_px, dtype=dtype).index_add(0, pix, weight)

    covered = alpha_flat >= ALPHA_BACKGROUND
    safe_alpha = torch.where(covered, alpha_flat, torch.ones_like(alpha_flat))
    depth_flat = torch.where(covered, depth_num / safe_alpha, torch.full_like(alpha_flat, float(background_depth)))
    color_flat = torch.where(covered.unsqueeze(1), color_flat, torch.zeros_like(color_flat))

    out = RenderOutput(
        color=color_flat.view(h, w_img, 3),
        depth=depth_flat.view(h, w_img),
        alpha_acc=alpha_flat.view(h, w_img),
    )
    if not collect_aux:
        return out, None
    aux = RenderAux(
        order=order_np,
        z=z.detach().numpy().copy(),
        center2d=np.stack([u_np, v_np], axis=1),
        radii=np.stack([ru_np, rv_np], axis=1),
        inv_cov=np.stack([inv_a.detach().numpy(), inv_b.detach().numpy(), inv_c.detach().numpy()], axis=1),
        opacity=opacity.detach().numpy().copy(),
        pair_gaussian=pg_np,
        pair_pixel=pix_np,
        ahat_raw=ahat_raw.detach().numpy().copy(),
        ahat=ahat.detach().numpy().copy(),
        t_excl=t_excl.detach().numpy().copy(),
        alpha_acc=out.alpha_acc.detach().numpy().copy(),
    )
    return out, aux


def render_forward(cloud: GaussianCloud, cam: Camera, background_depth: float = 0.0) -> RenderOutput:
    """Differentiable forward render; see module docstring for the rules.

    The output tensors stay on the autograd graph when the cloud's parameters
    require grad; wrap in torch.no_grad() for plain evaluation.
    """
    out, _ = _render(cloud, cam, background_depth, collect_aux=False)
    return out


def render_aux(cloud: GaussianCloud, cam: Camera, background_depth: float = 0.0) -> tuple[RenderOutput, RenderAux]:
    """Render and also return detached rasterizer internals."""
    with torch.no_grad():
        out, aux = _render(cloud, cam, background_depth, collect_aux=True)
    return out, aux


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    grad_color: np.ndarray | torch.Tensor,
    grad_depth: np.ndarray | torch.Tensor,
    background_depth: float = 0.0,
) -> RenderOutput:
    """Accumulate d(sum(grad_color * C) + sum(grad_depth * D))/d(params) into .grad.

    Recomputes the forward pass for the given cloud/camera, so the forward
    state always corresponds to the inputs; the upstream gradient arrays must
    match the camera's image size (StateMismatchError otherwise). Returns the
    recomputed RenderOutput (detached).
    """
    gc = torch.as_tensor(np.asarray(grad_color), dtype=cloud.dtype)
    gd = torch.as_tensor(np.asarray(grad_depth), dtype=cloud.dtype)
    if tuple(gc.shape) != (cam.height, cam.width, 3) or tuple(gd.shape) != (cam.height, cam.width):
        raise StateMismatchError(
            f"gradient buffers {tuple(gc.shape)}/{tuple(gd.shape)} do not match "
            f"the camera's {cam.height}x{cam.width} image"
        )
    params = cloud.parameters()
    was_grad = [p.requires_grad for p in params]
    cloud.requires_grad_(True)
    try:
        out = render_forward(cloud, cam, background_depth)
        scalar = (out.color * gc).sum() + (out.depth * gd).sum()
        grads = torch.autograd.grad(scalar, params, allow_unused=True)
    finally:
        for p, flag in zip(params, was_grad):
            p.requires_grad_(flag)
    for p, g in zip(params, grads):
        if g is None:
            continue
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        p.grad += g
    return RenderOutput(out.color.detach(), out.depth.detach(), out.alpha_acc.detach())


# Scalar reference operations (numpy, used by tests and diagnostics).

def build_covariance(scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """3D covariance R S S^T R^T from decoded (positive) scale and quaternion."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or not (scale > 0).all():
        raise ValueError(f"scale must be 3 positive values, got {scale}")
    rot = quaternion_to_rotation(quat)
    m = rot * scale[None, :]
    return m @ m.T


def eval_gaussian(mu: np.ndarray, scale: np.ndarray, quat: np.ndarray, point: np.ndarray) -> float:
    """exp(-0.5 (X - mu)^T Sigma^{-1} (X - mu)) for one Gaussian."""
    cov = build_covariance(scale, quat)
    d = np.asarray(point, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def project_gaussian(
    mu: np.ndarray, scale: np.ndarray, quat: np.ndarray, cam: Camera
) -> tuple[Pixel, np.ndarray, float]:
    """EWA projection of one Gaussian: screen center, 2D covariance, z depth.

    cov2d = J W Sigma W^T J^T plus the 0.3 px^2 diagonal floor, with J the
    Jacobian of the perspective projection at the center and W the
    world-to-camera rotation. Raises BehindCameraError for z <= 0.
    """
    x, y, z = cam.pose.apply(np.asarray(mu, dtype=np.float64))
    if z <= 0.0:
        raise BehindCameraError(f"Gaussian center at camera z = {z:g}")
    center = Pixel(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)
    jac = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    jw = jac @ cam.pose.rotation
    cov2d = jw @ build_covariance(scale, quat) @ jw.T + COV2D_FLOOR * np.eye(2)
    return center, cov2d, float(z)


# Checkpoint I/O.

CHECKPOINT_MAGIC = b"FDSGC\x00"
CHECKPOINT_VERSION = 1
_RECORD_FLOATS = 14


def save_checkpoint(cloud: GaussianCloud, path: str | Path) -> None:
    """Write the cloud as float32 records under a 16-byte header."""
    n = len(cloud)
    rec = np.empty((n, _RECORD_FLOATS), dtype="<f4")
    rec[:, 0:3] = cloud.mu.detach().numpy()
    rec[:, 3:6] = cloud.log_scale.detach().numpy()
    rec[:, 6:10] = cloud.quat.detach().numpy()
    rec[:, 10] = cloud.opacity_logit.detach().numpy()
    rec[:, 11:14] = cloud.color_logit.detach().numpy()
    header = CHECKPOINT_MAGIC + struct.pack("<HQ", CHECKPOINT_VERSION, n)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def load_checkpoint(path: str | Path, dtype=torch.float64) -> GaussianCloud:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise TruncatedFileError(f"{path}: header is {len(header)} bytes, expected 16")
        if header[:6] != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: bad magic {header[:6]!r}")
        version, count = struct.unpack("<HQ", header[6:16])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        payload = f.read()
    expected = count * _RECORD_FLOATS * 4
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise ValueError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, _RECORD_FLOATS)
    return GaussianCloud(
        rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14], dtype=dtype
    )
