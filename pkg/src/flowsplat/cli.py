"""Command-line entry point: gen-scene, train, eval, errormap.

One process per command, batch style. Settings resolve with explicit
precedence flags > config file > built-in defaults; environment variables
are never consulted. Every run directory gets a resolved_config.json
snapshot sufficient to reproduce it.

Exit codes are a stable contract: 0 success, 2 usage or bad config,
3 missing or invalid input files, 4 numerical divergence. Failures print
one JSON object {"error": class, "message": text} on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BadMagicError,
    MissingGroundTruthError,
    NoValidPixelsError,
    NumericalDivergenceError,
    SceneValidationError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .flow import endpoint_error, radiance_flow
from .gaussians import load_checkpoint, render_forward
from .imgio import turbo_colormap, write_pfm, write_ppm
from .losses import LossWeights
from .metrics import evaluate, write_report
from .oracle import OracleConfig, prior_flow
from .sampling import SamplerConfig, mean_rendered_depth, rng_stream, sample_view
from .scene import FloaterSpec, generate_scene, load_scene
from .train import TrainSchedule, train

__all__ = ["main"]

TRAIN_DEFAULTS = {
    "scene": None,
    "out": None,
    "total_iters": 3000,
    "fds_start_iter": 1000,
    "batch_size": 1,
    "lr_mu": 1.6e-4,
    "lr_mu_final": 1.6e-6,
    "lr_log_scale": 1e-3,
    "lr_quat": 1e-3,
    "lr_opacity": 1e-3,
    "lr_color": 1e-3,
    "lambda_dssim": 0.2,
    "lambda_normal": 0.0,
    "lambda_fds": 0.015,
    "sigma": 23.0,
    "sampler": "random",
    "sampler_seed": 0,
    "oracle": "noisy:0.5",
    "occlusion_aware": False,
    "seed": 0,
    "eval_every": 50,
    "checkpoint_every": 1000,
    "background_depth": None,
}


def _parse_sampler(spec: str, sigma: float, sampler_seed: int) -> SamplerConfig:
    """Spec strings: "random", "fixed", or "fixed:<xi0>"."""
    mode, _, arg = str(spec).partition(":")
    if mode == "random":
        if arg:
            raise ValueError("random sampler takes no argument")
        return SamplerConfig(sigma=sigma, mode="random", rng_seed=sampler_seed)
    if mode == "fixed":
        xi0 = float(arg) if arg else 0.0
        return SamplerConfig(sigma=sigma, mode="fixed", xi0=xi0, rng_seed=sampler_seed)
    raise ValueError(f"unknown sampler spec {spec!r}")


def _parse_oracle(spec: str, occlusion_aware: bool) -> OracleConfig:
    """Spec strings: "ground_truth", "noisy:<std>", or "file:<pattern>"."""
    kind, _, arg = str(spec).partition(":")
    if kind == "ground_truth":
        if arg:
            raise ValueError("ground_truth oracle takes no argument")
        return OracleConfig(kind="ground_truth", occlusion_aware=occlusion_aware)
    if kind == "noisy":
        std = float(arg) if arg else 0.5
        return OracleConfig(kind="noisy", noise_std=std, occlusion_aware=occlusion_aware)
    if kind == "file":
        if not arg:
            raise ValueError("file oracle needs a path pattern, e.g. file:flows/v{view_id}_i{iteration}.flo")
        return OracleConfig(kind="file", path_pattern=arg, occlusion_aware=occlusion_aware)
    raise ValueError(f"unknown oracle spec {spec!r}")


def _parse_range(spec: str) -> tuple[float, float]:
    lo, sep, hi = str(spec).partition(":")
    if not sep:
        raise ValueError(f"expected LO:HI, got {spec!r}")
    return (float(lo), float(hi))


def _resolve(defaults: dict, config_path: str | None, flags: dict) -> dict:
    resolved = dict(defaults)
    if config_path is not None:
        with open(config_path) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = value
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_snapshot(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=1)
        f.write("\n")


def cmd_gen_scene(args: argparse.Namespace) -> int:
    floaters = FloaterSpec(
        count=args.floaters,
        opacity_range=_parse_range(args.floater_opacity),
        depth_frac_range=_parse_range(args.floater_depth),
        scale=args.floater_scale,
    )
    scene = generate_scene(
        args.out,
        kind=args.kind,
        seed=args.seed,
        n_train=args.views,
        n_test=args.test_views,
        width=args.width,
        height=args.height,
        focal=args.focal,
        n_points=args.points,
        sigma_pos=args.sigma_pos,
        init_opacity=args.init_opacity,
        scale_factor=args.scale_factor,
        floaters=floaters,
        strategy=args.strategy,
    )
    print(f"scene {args.kind} seed={args.seed}: {len(scene.train_views)} train / "
          f"{len(scene.test_views)} test views -> {scene.root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    flags = {
        "scene": args.scene,
        "out": args.out,
        "total_iters": args.iters,
        "fds_start_iter": args.fds_start,
        "batch_size": args.batch,
        "lr_mu": args.lr_mu,
        "lr_mu_final": args.lr_mu_final,
        "lambda_dssim": args.lambda_dssim,
        "lambda_fds": args.lambda_fds,
        "sigma": args.sigma,
        "sampler": args.sampler,
        "sampler_seed": args.sampler_seed,
        "oracle": args.oracle,
        "occlusion_aware": args.occlusion_aware,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "checkpoint_every": args.checkpoint_every,
        "background_depth": args.background_depth,
    }
    if args.fds is not None:
        if args.lambda_fds is not None:
            raise ValueError("--fds conflicts with --lambda-fds; give one")
        flags["lambda_fds"] = 0.0 if args.fds == "off" else TRAIN_DEFAULTS["lambda_fds"]
    cfg = _resolve(TRAIN_DEFAULTS, args.config, flags)
    if cfg["scene"] is None or cfg["out"] is None:
        raise ValueError("scene and out must be set via flags or config")

    schedule = TrainSchedule(
        total_iters=int(cfg["total_iters"]),
        fds_start_iter=int(cfg["fds_start_iter"]),
        batch_size=int(cfg["batch_size"]),
        lr_mu=float(cfg["lr_mu"]),
        lr_mu_final=float(cfg["lr_mu_final"]),
        lr_log_scale=float(cfg["lr_log_scale"]),
        lr_quat=float(cfg["lr_quat"]),
        lr_opacity=float(cfg["lr_opacity"]),
        lr_color=float(cfg["lr_color"]),
        eval_every=int(cfg["eval_every"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
    )
    weights = LossWeights(
        lambda_dssim=float(cfg["lambda_dssim"]),
        lambda_normal=float(cfg["lambda_normal"]),
        lambda_fds=float(cfg["lambda_fds"]),
    )
    sampler = _parse_sampler(cfg["sampler"], float(cfg["sigma"]), int(cfg["sampler_seed"]))
    oracle = _parse_oracle(cfg["oracle"], bool(cfg["occlusion_aware"]))

    scene = load_scene(cfg["scene"])
    run_dir = Path(cfg["out"])
    _write_snapshot(run_dir, cfg)
    bg = cfg["background_depth"]
    result = train(
        scene, run_dir,
        schedule=schedule, weights=weights, sampler=sampler, oracle=oracle,
        seed=int(cfg["seed"]),
        background_depth=None if bg is None else float(bg),
    )
    if result.rows:
        last = result.rows[-1]
        print(f"trained {schedule.total_iters} iters: abs_rel={last['abs_rel']:.6g} "
              f"psnr={last['psnr']:.6g} -> {result.run_dir}")
    else:
        print(f"trained {schedule.total_iters} iters -> {result.run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    cloud = load_checkpoint(args.checkpoint)
    report = evaluate(cloud, scene, split=args.split, background_depth=args.background_depth)
    out = Path(args.out)
    snapshot = {
        "checkpoint": str(args.checkpoint),
        "scene": str(args.scene),
        "split": args.split,
        "background_depth": args.background_depth,
        "out": str(args.out),
    }
    _write_snapshot(out, snapshot)
    write_report(report, out)

    bg = scene.far if args.background_depth is None else args.background_depth
    views = scene.train_views if args.split == "train" else scene.test_views
    for view in views:
        with torch.no_grad():
            rendered = render_forward(cloud, view.camera, background_depth=bg)
        depth = rendered.depth.numpy()
        alpha = rendered.alpha_acc.numpy()
        stem = f"view_{view.view_id:03d}"
        write_ppm(rendered.color.numpy(), out / f"{stem}_color.ppm")
        write_pfm(depth, out / f"{stem}_depth.pfm")
        valid = np.isfinite(view.depth) & (alpha > 1e-4)
        err = np.full(depth.shape, np.nan)
        err[valid] = np.abs(depth[valid] - view.depth[valid]) / view.depth[valid]
        vmax = float(np.nanmax(err)) if valid.any() else 1.0
        write_ppm(turbo_colormap(err, 0.0, max(vmax, 1e-12)), out / f"{stem}_error.ppm")
    print(f"eval {args.split}: abs_rel={report.mean_abs_rel:.6g} psnr={report.mean_psnr:.6g} "
          f"ssim={report.mean_ssim:.6g} -> {out}")
    return 0


def _masked_mean_maps(maps: list[np.ndarray]) -> np.ndarray:
    """Per-pixel mean over samples, ignoring NaN; all-NaN pixels stay NaN."""
    stack = np.stack(maps)
    finite = np.isfinite(stack)
    count = finite.sum(axis=0)
    total = np.where(finite, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def cmd_errormap(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    cloud = load_checkpoint(args.checkpoint)
    oracle = _parse_oracle(args.oracle, False)
    sampler = SamplerConfig(sigma=args.sigma, mode="random", rng_seed=args.seed)
    view = scene.view(args.view)
    cam = view.camera

    with torch.no_grad():
        rendered = render_forward(cloud, cam, background_depth=scene.far)
    mean_depth = mean_rendered_depth(rendered.depth, rendered.alpha_acc)
    gt_depth = torch.from_numpy(view.depth)
    src_valid = rendered.alpha_acc >= 1e-4

    radiance_maps, prior_maps, rows = [], [], []
    for k in range(args.samples):
        rng = rng_stream(args.seed, "errormap", k)
        sampled = sample_view(cam, mean_depth, sampler, rng)
        with torch.no_grad():
            rad = radiance_flow(rendered.depth, cam, sampled.camera, src_valid=src_valid)
            gt_flow = radiance_flow(gt_depth, cam, sampled.camera)
        prior = prior_flow(oracle, scene, view.view_id, sampled.camera, seed=args.seed, iteration=k)
        epe_rad, map_rad = endpoint_error(rad, gt_flow)
        epe_pri, map_pri = endpoint_error(prior, gt_flow)
        radiance_maps.append(map_rad)
        prior_maps.append(map_pri)
        rows.append((k, sampled.xi, sampled.eps_t, epe_rad, epe_pri))

    mean_rad_map = _masked_mean_maps(radiance_maps)
    mean_pri_map = _masked_mean_maps(prior_maps)
    mean_rad = float(np.mean([r[3] for r in rows]))
    mean_pri = float(np.mean([r[4] for r in rows]))

    out = Path(args.out)
    snapshot = {
        "checkpoint": str(args.checkpoint),
        "scene": str(args.scene),
        "view": args.view,
        "samples": args.samples,
        "sigma": args.sigma,
        "oracle": args.oracle,
        "seed": args.seed,
        "out": str(args.out),
    }
    _write_snapshot(out, snapshot)
    finite = np.concatenate([mean_rad_map[np.isfinite(mean_rad_map)], mean_pri_map[np.isfinite(mean_pri_map)]])
    vmax = float(finite.max()) if finite.size else 1.0
    write_pfm(mean_rad_map, out / "radiance_epe.pfm")
    write_pfm(mean_pri_map, out / "prior_epe.pfm")
    write_ppm(turbo_colormap(mean_rad_map, 0.0, max(vmax, 1e-12)), out / "radiance_epe.ppm")
    write_ppm(turbo_colormap(mean_pri_map, 0.0, max(vmax, 1e-12)), out / "prior_epe.ppm")
    lines = ["sample,xi,eps_t,epe_radiance,epe_prior"]
    for k, xi, eps_t, epe_rad, epe_pri in rows:
        lines.append(f"{k},{xi:.12g},{eps_t:.12g},{epe_rad:.12g},{epe_pri:.12g}")
    lines.append(f"mean,,,{mean_rad:.12g},{mean_pri:.12g}")
    (out / "errors.csv").write_text("\n".join(lines) + "\n")
    print(f"errormap view={args.view} K={args.samples}: radiance_epe={mean_rad:.6g} "
          f"prior_epe={mean_pri:.6g} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsplat",
        description="Gaussian-splat training with flow supervision at sampled views.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scene", help="generate a synthetic scene with ground truth")
    gen.add_argument("--kind", default="textured_room", choices=("textured_room", "plane", "box"))
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--views", type=int, default=12, help="number of training views")
    gen.add_argument("--test-views", type=int, default=4)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--focal", type=float, default=61.0)
    gen.add_argument("--points", type=int, default=1500, help="initialization cloud size")
    gen.add_argument("--sigma-pos", type=float, default=0.03, help="init position noise (world units)")
    gen.add_argument("--init-opacity", type=float, default=0.8)
    gen.add_argument("--scale-factor", type=float, default=0.7, help="init scale vs nearest-neighbor distance")
    gen.add_argument("--floaters", type=int, default=40, help="spurious mid-air Gaussians in the init")
    gen.add_argument("--floater-opacity", default="0.6:0.9", metavar="LO:HI")
    gen.add_argument("--floater-depth", default="0.3:0.7", metavar="LO:HI",
                     help="floater placement as fraction of surface depth")
    gen.add_argument("--floater-scale", type=float, default=0.035)
    gen.add_argument("--strategy", default="gt_surface_noisy", choices=("gt_surface_noisy", "random_box"))
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_scene)

    tr = sub.add_parser("train", help="optimize a cloud against a scene")
    tr.add_argument("--scene")
    tr.add_argument("--out")
    tr.add_argument("--config", help="JSON config file; flags override it")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--fds-start", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr-mu", type=float)
    tr.add_argument("--lr-mu-final", type=float)
    tr.add_argument("--lambda-dssim", type=float)
    tr.add_argument("--lambda-fds", type=float)
    tr.add_argument("--fds", choices=("on", "off"), help="shorthand for the default flow weight or zero")
    tr.add_argument("--sigma", type=float, help="expected flow magnitude at sampled views, pixels")
    tr.add_argument("--sampler", help='"random", "fixed", or "fixed:<xi0>"')
    tr.add_argument("--sampler-seed", type=int)
    tr.add_argument("--oracle", help='"ground_truth", "noisy:<std>", or "file:<pattern>"')
    tr.add_argument("--occlusion-aware", action="store_true", default=None)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--eval-every", type=int)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--background-depth", type=float)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint against ground truth")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--background-depth", type=float)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    em = sub.add_parser("errormap", help="mean flow-error maps over sampled views")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--scene", required=True)
    em.add_argument("--view", type=int, default=0)
    em.add_argument("--samples", type=int, default=8, metavar="K")
    em.add_argument("--sigma", type=float, default=23.0)
    em.add_argument("--oracle", default="noisy:0.5")
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--out", required=True)
    em.set_defaults(func=cmd_errormap)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except NumericalDivergenceError as exc:
        _print_error(exc)
        return 4
    except ValueError as exc:
        _print_error(exc)
        return 2
    except (
        OSError,
        BadMagicError,
        TruncatedFileError,
        MissingGroundTruthError,
        SceneValidationError,
        ShapeMismatchError,
        NoValidPixelsError,
        KeyError,
    ) as exc:
        _print_error(exc)
        return 3


def _print_error(exc: BaseException) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
