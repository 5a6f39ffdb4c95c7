"""Synthetic scenes with exact analytic ground truth.

Three scene kinds, all ray-traced against closed-form geometry (never
splatted, so ground truth stays independent of the renderer):

- textured_room: the inside of an axis-aligned box, cameras on an inward
  facing arc near one wall;
- plane: a fronto-parallel textured wall at z = 2 with identity-rotation
  cameras at z = 0, so GT depth is exactly 2 everywhere;
- box: the room plus a cuboid standing on the floor (adds occlusions).

Surfaces carry a procedural multi-frequency sinusoid texture (seeded), so
photometric and flow errors are informative everywhere. World axes follow the
camera convention: y points down, so the floor is the +y wall.

A scene directory contains scene.json (manifest), gt/view_*.ppm (color,
quantized to 8 bits), gt/view_*.pfm (float32 depth), and init.fdsgc (the
initial Gaussian cloud). Everything is reproducible byte-for-byte from the
manifest's seeds and parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import MissingGroundTruthError, SceneValidationError
from .gaussians import GaussianCloud, save_checkpoint
from .geometry import Camera, RigidTransform, look_at
from .imgio import read_pfm, read_ppm, write_pfm, write_ppm
from .sampling import rng_stream

__all__ = [
    "FloaterSpec",
    "LoadedScene",
    "SceneGeometry",
    "SceneView",
    "build_geometry",
    "generate_scene",
    "init_cloud",
    "load_scene",
    "make_cameras",
]

SCENE_FORMAT = "flowsplat-scene"
SCENE_VERSION = 1

_ROOM_LO = np.array([-2.0, -1.5, -2.0])
_ROOM_HI = np.array([2.0, 1.5, 2.0])
_BOX_LO = np.array([-0.45, 0.25, 0.45])
_BOX_HI = np.array([0.45, 1.5, 1.35])
_PLANE_Z = 2.0
_TEXTURE_COMPONENTS = 6
_TEXTURE_AMPLITUDE = 0.45


@dataclass(frozen=True)
class FloaterSpec:
    """Spurious Gaussians injected into free space between cameras and
    surfaces: each floater sits at a random fraction of the GT depth along a
    random training-view ray."""

    count: int = 40
    opacity_range: tuple[float, float] = (0.6, 0.9)
    depth_frac_range: tuple[float, float] = (0.3, 0.7)
    scale: float = 0.035

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError(f"floater count must be >= 0, got {self.count}")
        lo, hi = self.opacity_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"opacity_range must satisfy 0 < lo <= hi < 1, got {self.opacity_range}")
        lo, hi = self.depth_frac_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"depth_frac_range must satisfy 0 < lo <= hi < 1, got {self.depth_frac_range}")
        if self.scale <= 0:
            raise ValueError(f"floater scale must be positive, got {self.scale}")


class SceneGeometry:
    """Analytic scene surfaces plus the procedural texture for one seed."""

    def __init__(self, kind: str, seed: int):
        if kind not in ("textured_room", "plane", "box"):
            raise ValueError(f"unknown scene kind {kind!r}")
        self.kind = kind
        self.seed = int(seed)
        rng = rng_stream(seed, "texture")
        j = np.arange(_TEXTURE_COMPONENTS)
        mags = 1.5 * (14.0 / 1.5) ** (j / (_TEXTURE_COMPONENTS - 1))
        dirs = rng.normal(size=(3, _TEXTURE_COMPONENTS, 3))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        self._freqs = dirs * mags[None, :, None]
        self._phases = rng.uniform(0.0, 2.0 * math.pi, size=(3, _TEXTURE_COMPONENTS))
        amps = (0.55 ** j)[None, :] * rng.choice([-1.0, 1.0], size=(3, _TEXTURE_COMPONENTS))
        self._amps = amps * (_TEXTURE_AMPLITUDE / np.abs(amps).sum(axis=1, keepdims=True))

    def color_at(self, points: np.ndarray) -> np.ndarray:
        """Texture color in [0,1]^3 for (..., 3) world points."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        out = np.empty((flat.shape[0], 3))
        for ch in range(3):
            phase = flat @ self._freqs[ch].T + self._phases[ch][None, :]
            out[:, ch] = 0.5 + np.sin(phase) @ self._amps[ch]
        return np.clip(out, 0.0, 1.0).reshape(pts.shape)

    def _ray_t(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive hit parameter for rays origin + t * dirs.

        dirs have camera-frame z component 1, so t equals camera z depth.
        """
        eps = 1e-15
        if self.kind == "plane":
            dz = dirs[..., 2]
            if not (dz > eps).all():
                raise SceneValidationError("plane scene ray parallel to or facing away from the plane")
            return (_PLANE_Z - origin[2]) / dz

        def room_exit():
            t = np.full(dirs.shape[:-1], np.inf)
            for a in range(3):
                da = dirs[..., a]
                safe = np.where(np.abs(da) > eps, da, 1.0)
                ta = np.where(
                    da > eps,
                    (_ROOM_HI[a] - origin[a]) / safe,
                    np.where(da < -eps, (_ROOM_LO[a] - origin[a]) / safe, np.inf),
                )
                t = np.minimum(t, ta)
            return t

        t = room_exit()
        if self.kind == "box":
            tmin = np.full(dirs.shape[:-1], -np.inf)
            tmax = np.full(dirs.shape[:-1], np.inf)
            for a in range(3):
                da = dirs[..., a]
                para = np.abs(da) <= eps
                safe = np.where(para, 1.0, da)
                t1 = (_BOX_LO[a] - origin[a]) / safe
                t2 = (_BOX_HI[a] - origin[a]) / safe
                lo_a = np.minimum(t1, t2)
                hi_a = np.maximum(t1, t2)
                inside = (origin[a] >= _BOX_LO[a]) & (origin[a] <= _BOX_HI[a])
                lo_a = np.where(para, np.where(inside, -np.inf, np.inf), lo_a)
                hi_a = np.where(para, np.where(inside, np.inf, -np.inf), hi_a)
                tmin = np.maximum(tmin, lo_a)
                tmax = np.minimum(tmax, hi_a)
            hit = (tmin <= tmax) & (tmin > 0)
            t = np.where(hit, np.minimum(t, tmin), t)
        return t

    def trace(self, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
        """Ray-trace GT (depth, color) for a camera. Depth is camera z."""
        v, u = np.meshgrid(
            np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij"
        )
        dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
        rot = cam.pose.rotation
        dirs_world = dirs_cam @ rot  # R^T applied to each direction
        origin = -rot.T @ cam.pose.translation
        t = self._ray_t(origin, dirs_world)
        points = origin[None, None, :] + t[..., None] * dirs_world
        return t, self.color_at(points)

    def trace_depth(self, cam: Camera) -> np.ndarray:
        return self.trace(cam)[0]


def build_geometry(kind: str, seed: int) -> SceneGeometry:
    return SceneGeometry(kind, seed)


def make_cameras(
    kind: str, n_train: int, n_test: int, width: int, height: int, focal: float
) -> list[tuple[int, str, Camera]]:
    """Camera rig for a scene kind; test views are interleaved on the path."""
    if n_train < 2:
        raise ValueError(f"need at least 2 training views, got {n_train}")
    if n_test < 0:
        raise ValueError(f"n_test must be >= 0, got {n_test}")
    total = n_train + n_test
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    test_slots = {int(round((k + 0.5) * total / max(n_test, 1))) for k in range(n_test)} if n_test else set()
    if len(test_slots) != n_test:
        raise ValueError(f"cannot interleave {n_test} test views among {total}")

    cams = []
    for i in range(total):
        frac = i / (total - 1) if total > 1 else 0.5
        if kind == "plane":
            angle = 2.0 * math.pi * frac
            pos = np.array([0.35 * math.sin(angle), 0.25 * math.cos(angle), 0.0])
            pose = RigidTransform(np.eye(3), -pos)
        else:
            theta = -0.96 + 1.92 * frac
            pos = np.array(
                [1.5 * math.sin(theta), -0.1 + 0.25 * math.sin(3.0 * theta), 0.3 - 1.5 * math.cos(theta)]
            )
            pose = look_at(pos, np.array([0.0, 0.05, 1.0]))
        split = "test" if i in test_slots else "train"
        cams.append((i, split, Camera(focal, focal, cx, cy, width, height, pose)))
    return cams


@dataclass
class SceneView:
    view_id: int
    split: str
    camera: Camera
    color: np.ndarray  # (H, W, 3) float64 in [0,1], as stored (8-bit quantized)
    depth: np.ndarray  # (H, W) float64, as stored (float32 precision)


class LoadedScene:
    def __init__(self, root: Path, manifest: dict, views: list[SceneView], geometry: SceneGeometry):
        self.root = Path(root)
        self.manifest = manifest
        self.views = views
        self.geometry = geometry
        self._by_id = {v.view_id: v for v in views}
        self.near = float(manifest["near"])
        self.far = float(manifest["far"])
        self.width = int(manifest["width"])
        self.height = int(manifest["height"])

    @property
    def train_views(self) -> list[SceneView]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> list[SceneView]:
        return [v for v in self.views if v.split == "test"]

    def view(self, view_id: int) -> SceneView:
        if view_id not in self._by_id:
            raise MissingGroundTruthError(f"scene has no view {view_id}")
        return self._by_id[view_id]

    def camera(self, view_id: int) -> Camera:
        return self.view(view_id).camera

    def gt_depth(self, view_id: int) -> np.ndarray:
        return self.view(view_id).depth

    def gt_color(self, view_id: int) -> np.ndarray:
        return self.view(view_id).color

    def trace_depth(self, cam: Camera) -> np.ndarray:
        return self.geometry.trace_depth(cam)

    @property
    def init_checkpoint(self) -> Path:
        return self.root / self.manifest["init"]["checkpoint"]


def _camera_to_json(cam: Camera) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "rotation": [float(x) for x in cam.pose.rotation.reshape(-1)],
        "translation": [float(x) for x in cam.pose.translation],
    }


def _camera_from_json(d: dict, path: str) -> Camera:
    try:
        pose = RigidTransform(
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["translation"], dtype=np.float64),
        )
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), pose)
    except (KeyError, ValueError) as exc:
        raise SceneValidationError(f"{path}: bad camera record: {exc}") from exc


def _floaters_to_json(spec: FloaterSpec) -> dict:
    return {
        "count": spec.count,
        "opacity_range": list(spec.opacity_range),
        "depth_frac_range": list(spec.depth_frac_range),
        "scale": spec.scale,
    }


def _floaters_from_json(d: dict) -> FloaterSpec:
    return FloaterSpec(
        count=int(d["count"]),
        opacity_range=tuple(d["opacity_range"]),
        depth_frac_range=tuple(d["depth_frac_range"]),
        scale=float(d["scale"]),
    )


def generate_scene(
    out_dir: str | Path,
    kind: str = "textured_room",
    seed: int = 0,
    n_train: int = 12,
    n_test: int = 4,
    width: int = 64,
    height: int = 64,
    focal: float = 61.0,
    n_points: int = 1500,
    sigma_pos: float = 0.03,
    init_opacity: float = 0.8,
    scale_factor: float = 0.7,
    floaters: FloaterSpec | None = None,
    strategy: str = "gt_surface_noisy",
) -> LoadedScene:
    """Generate a scene directory (GT files, manifest, initial checkpoint)."""
    if floaters is None:
        floaters = FloaterSpec()
    root = Path(out_dir)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    geometry = build_geometry(kind, seed)
    rigs = make_cameras(kind, n_train, n_test, width, height, focal)

    views_json = []
    depth_min, depth_max = math.inf, -math.inf
    for view_id, split, cam in rigs:
        depth, color = geometry.trace(cam)
        if not np.isfinite(depth).all() or not (depth > 0).all():
            raise SceneValidationError(f"view {view_id}: ray tracer produced non-finite or non-positive depth")
        depth_min = min(depth_min, float(depth.min()))
        depth_max = max(depth_max, float(depth.max()))
        color_rel = f"gt/view_{view_id:03d}.ppm"
        depth_rel = f"gt/view_{view_id:03d}.pfm"
        write_ppm(color, root / color_rel)
        write_pfm(depth, root / depth_rel)
        views_json.append(
            {
                "view_id": view_id,
                "split": split,
                "camera": _camera_to_json(cam),
                "color": color_rel,
                "depth": depth_rel,
            }
        )

    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "kind": kind,
        "seed": int(seed),
        "width": width,
        "height": height,
        "focal": focal,
        "near": 0.95 * depth_min,
        "far": 1.05 * depth_max,
        "views": views_json,
        "init": {
            "strategy": strategy,
            "n_points": n_points,
            "sigma_pos": sigma_pos,
            "init_opacity": init_opacity,
            "scale_factor": scale_factor,
            "seed": int(seed),
            "floaters": _floaters_to_json(floaters),
            "checkpoint": "init.fdsgc",
        },
    }
    with open(root / "scene.json", "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")

    scene = load_scene(root)
    cloud = init_cloud(
        scene,
        n_points=n_points,
        strategy=strategy,
        sigma_pos=sigma_pos,
        floaters=floaters,
        seed=seed,
        init_opacity=init_opacity,
        scale_factor=scale_factor,
    )
    save_checkpoint(cloud, scene.init_checkpoint)
    return scene


def load_scene(path: str | Path) -> LoadedScene:
    """Load and validate a scene directory (or its scene.json path)."""
    root = Path(path)
    if root.name == "scene.json":
        root = root.parent
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise MissingGroundTruthError(f"{manifest_path}: manifest not found")
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as exc:
            raise SceneValidationError(f"{manifest_path}: invalid JSON: {exc}") from exc

    for key in ("format", "version", "kind", "seed", "width", "height", "near", "far", "views", "init"):
        if key not in manifest:
            raise SceneValidationError(f"{manifest_path}: missing key {key!r}")
    if manifest["format"] != SCENE_FORMAT or int(manifest["version"]) != SCENE_VERSION:
        raise SceneValidationError(
            f"{manifest_path}: unsupported format {manifest['format']!r} v{manifest['version']!r}"
        )
    w, h = int(manifest["width"]), int(manifest["height"])
    near, far = float(manifest["near"]), float(manifest["far"])

    views = []
    seen = set()
    for i, rec in enumerate(manifest["views"]):
        where = f"{manifest_path}: views[{i}]"
        for key in ("view_id", "split", "camera", "color", "depth"):
            if key not in rec:
                raise SceneValidationError(f"{where}: missing key {key!r}")
        vid = int(rec["view_id"])
        if vid in seen:
            raise SceneValidationError(f"{where}: duplicate view_id {vid}")
        seen.add(vid)
        if rec["split"] not in ("train", "test"):
            raise SceneValidationError(f"{where}: bad split {rec['split']!r}")
        cam = _camera_from_json(rec["camera"], where)
        if cam.width != w or cam.height != h:
            raise SceneValidationError(f"{where}.camera: size {cam.width}x{cam.height} != scene {w}x{h}")
        color_path = root / rec["color"]
        depth_path = root / rec["depth"]
        if not color_path.exists():
            raise MissingGroundTruthError(f"{where}.color: file missing: {color_path}")
        if not depth_path.exists():
            raise MissingGroundTruthError(f"{where}.depth: file missing: {depth_path}")
        color = read_ppm(color_path).astype(np.float64) / 255.0
        depth = read_pfm(depth_path)
        if color.shape != (h, w, 3):
            raise SceneValidationError(f"{where}.color: {color.shape[1]}x{color.shape[0]} != scene {w}x{h}")
        if depth.shape != (h, w):
            raise SceneValidationError(f"{where}.depth: {depth.shape[1]}x{depth.shape[0]} != scene {w}x{h}")
        if not np.isfinite(depth).all() or depth.min() < near - 1e-6 or depth.max() > far + 1e-6:
            raise SceneValidationError(f"{where}.depth: values outside [near, far] = [{near:g}, {far:g}]")
        views.append(SceneView(vid, rec["split"], cam, color, depth))

    if not any(v.split == "train" for v in views):
        raise SceneValidationError(f"{manifest_path}: no training views")
    geometry = build_geometry(manifest["kind"], int(manifest["seed"]))
    return LoadedScene(root, manifest, views, geometry)


def _logit(p: np.ndarray | float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def _nn_distance(points: np.ndarray) -> np.ndarray:
    """Distance to the nearest other point, brute force in chunks."""
    n = points.shape[0]
    if n == 1:
        return np.array([0.1])
    out = np.empty(n)
    chunk = 512
    for i0 in range(0, n, chunk):
        block = points[i0 : i0 + chunk]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        for r in range(block.shape[0]):
            d2[r, i0 + r] = np.inf
        out[i0 : i0 + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _unproject_samples(scene: LoadedScene, view_idx, us, vs, depths) -> np.ndarray:
    """World points for per-sample (train-view index, pixel, depth)."""
    train = scene.train_views
    pts = np.empty((len(us), 3))
    for k, view in enumerate(train):
        mask = view_idx == k
        if not mask.any():
            continue
        cam = view.camera
        d = depths[mask]
        x = d * (us[mask] - cam.cx) / cam.fx
        y = d * (vs[mask] - cam.cy) / cam.fy
        p_cam = np.stack([x, y, d], axis=1)
        pts[mask] = cam.pose.inverse().apply(p_cam)
    return pts


def init_cloud(
    scene: LoadedScene,
    n_points: int = 1500,
    strategy: str = "gt_surface_noisy",
    sigma_pos: float = 0.03,
    floaters: FloaterSpec | None = None,
    seed: int = 0,
    init_opacity: float = 0.8,
    scale_factor: float = 0.7,
    dtype=torch.float64,
) -> GaussianCloud:
    """Initial cloud: surface samples (noisy GT unprojection or a random box
    fill) plus appended floaters. Floaters draw from their own RNG stream, so
    the surface part is identical for any floater count under one seed."""
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    if floaters is None:
        floaters = FloaterSpec(count=0)
    train = scene.train_views
    h, w = scene.height, scene.width

    rng = rng_stream(seed, "init", "surface")
    if strategy == "gt_surface_noisy":
        view_idx = rng.integers(0, len(train), size=n_points)
        us = rng.integers(0, w, size=n_points).astype(np.float64)
        vs = rng.integers(0, h, size=n_points).astype(np.float64)
        noise = rng.normal(0.0, 1.0, size=(n_points, 3)) * sigma_pos
        depths = np.array([train[k].depth[int(v), int(u)] for k, u, v in zip(view_idx, us, vs)])
        surface = _unproject_samples(scene, view_idx, us, vs, depths)
        colors = scene.geometry.color_at(surface)
        mu = surface + noise
    elif strategy == "random_box":
        lo = _ROOM_LO + 0.1
        hi = _ROOM_HI - 0.1
        mu = rng.uniform(lo, hi, size=(n_points, 3))
        colors = np.full((n_points, 3), 0.5)
    else:
        raise ValueError(f"unknown init strategy {strategy!r}")

    nn = _nn_distance(mu)
    scales = np.clip(scale_factor * nn, 1e-3, 0.3)
    log_scale = np.log(scales)[:, None].repeat(3, axis=1)
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n_points, 1))
    opacity_logit = np.full(n_points, _logit(init_opacity))
    color_logit = _logit(np.clip(colors, 1e-3, 1.0 - 1e-3))

    if floaters.count > 0:
        rng_f = rng_stream(seed, "init", "floaters")
        f_view = rng_f.integers(0, len(train), size=floaters.count)
        f_u = rng_f.integers(0, w, size=floaters.count).astype(np.float64)
        f_v = rng_f.integers(0, h, size=floaters.count).astype(np.float64)
        frac = rng_f.uniform(*floaters.depth_frac_range, size=floaters.count)
        f_op = rng_f.uniform(*floaters.opacity_range, size=floaters.count)
        gt_d = np.array([train[k].depth[int(v), int(u)] for k, u, v in zip(f_view, f_u, f_v)])
        f_mu = _unproject_samples(scene, f_view, f_u, f_v, gt_d * frac)
        mean_color = np.mean([v.color.reshape(-1, 3).mean(axis=0) for v in train], axis=0)

        mu = np.concatenate([mu, f_mu])
        log_scale = np.concatenate([log_scale, np.full((floaters.count, 3), math.log(floaters.scale))])
        quat = np.concatenate([quat, np.tile([1.0, 0.0, 0.0, 0.0], (floaters.count, 1))])
        opacity_logit = np.concatenate([opacity_logit, _logit(f_op)])
        color_logit = np.concatenate(
            [color_logit, np.tile(_logit(np.clip(mean_color, 1e-3, 1 - 1e-3)), (floaters.count, 1))]
        )

    return GaussianCloud(mu, log_scale, quat, opacity_logit, color_logit, dtype=dtype)


def init_cloud_from_manifest(scene: LoadedScene, dtype=torch.float64) -> GaussianCloud:
    """Rebuild the initial cloud exactly as gen-scene wrote it."""
    init = scene.manifest["init"]
    return init_cloud(
        scene,
        n_points=int(init["n_points"]),
        strategy=init["strategy"],
        sigma_pos=float(init["sigma_pos"]),
        floaters=_floaters_from_json(init["floaters"]),
        seed=int(init["seed"]),
        init_opacity=float(init["init_opacity"]),
        scale_factor=float(init["scale_factor"]),
        dtype=dtype,
    )
