"""Optimization loop: photometric fitting plus flow supervision at sampled views.

Each step renders one training view, scores it photometrically, and, once the
flow term is active, additionally samples a nearby unobserved view, renders
it, compares the flow implied by the rendered depth against the prior flow,
and adds that mismatch to the loss. The sampled-view pose comes from its own
RNG stream, so a run with the flow term disabled is bit-identical to one
where the branch never existed: both consume the view stream the same way
and neither touches the xi stream.

Geometry learning rate decays exponentially while the other parameter groups
stay fixed, mirroring the usual splatting schedule compressed to desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalDivergenceError
from .gaussians import GaussianCloud, render_forward, save_checkpoint
from .losses import LossWeights, fds_loss_term, photometric_terms
from .metrics import evaluate
from .oracle import OracleConfig, prior_flow
from .flow import radiance_flow
from .sampling import SamplerConfig, mean_rendered_depth, rng_stream, sample_view
from .scene import LoadedScene, init_cloud_from_manifest

__all__ = ["StepReport", "TrainResult", "TrainSchedule", "Trainer", "train"]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
METRICS_HEADER = "iter,loss_total,loss_l1,loss_dssim,loss_fds,abs_rel,psnr,eps_t"


@dataclass(frozen=True)
class TrainSchedule:
    total_iters: int = 3000
    fds_start_iter: int = 1000
    batch_size: int = 1
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_log_scale: float = 1e-3
    lr_quat: float = 1e-3
    lr_opacity: float = 1e-3
    lr_color: float = 1e-3
    eval_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self) -> None:
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if not 0 <= self.fds_start_iter:
            raise ValueError("fds_start_iter must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_mu", "lr_mu_final", "lr_log_scale", "lr_quat", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class StepReport:
    iteration: int
    loss_total: float
    loss_l1: float
    loss_dssim: float
    loss_fds: float | None
    eps_t: float | None
    xi: float | None
    view_ids: list[int]
    fds_valid_px: int | None
    fds_no_valid: bool
    grad_norms: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Holds the cloud, optimizer, and RNG streams for one training run."""

    def __init__(
        self,
        scene: LoadedScene,
        cloud: GaussianCloud,
        schedule: TrainSchedule | None = None,
        weights: LossWeights | None = None,
        sampler: SamplerConfig | None = None,
        oracle: OracleConfig | None = None,
        seed: int = 0,
        background_depth: float | None = None,
    ) -> None:
        self.scene = scene
        self.cloud = cloud
        self.schedule = schedule or TrainSchedule()
        self.weights = weights or LossWeights()
        self.sampler = sampler or SamplerConfig()
        self.oracle = oracle or OracleConfig()
        self.seed = int(seed)
        self.background_depth = scene.far if background_depth is None else float(background_depth)

        cloud.requires_grad_(True)
        lrs = {
            "mu": self.schedule.lr_mu,
            "log_scale": self.schedule.lr_log_scale,
            "quat": self.schedule.lr_quat,
            "opacity_logit": self.schedule.lr_opacity,
            "color_logit": self.schedule.lr_color,
        }
        groups = [
            {"params": [param], "lr": lrs[name], "name": name}
            for name, param in cloud.named_parameters().items()
        ]
        self.optimizer = torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.view_rng = rng_stream(self.seed, "views")
        self.xi_rng = rng_stream(self.sampler.rng_seed, "xi")
        self._train_views = scene.train_views
        if not self._train_views:
            raise ValueError("scene has no train views")

    def mu_lr(self, iteration: int) -> float:
        """Exponential interpolation from lr_mu to lr_mu_final across the run."""
        span = max(self.schedule.total_iters - 1, 1)
        frac = min(max(iteration / span, 0.0), 1.0)
        return self.schedule.lr_mu * (self.schedule.lr_mu_final / self.schedule.lr_mu) ** frac

    def fds_active(self, iteration: int) -> bool:
        return self.weights.lambda_fds > 0 and iteration >= self.schedule.fds_start_iter

    def step(self, iteration: int) -> StepReport:
        sched, weights = self.schedule, self.weights
        picks = self.view_rng.integers(0, len(self._train_views), size=sched.batch_size)
        active = self.fds_active(iteration)

        self.cloud.zero_grad()
        total = None
        l1_sum = 0.0
        dssim_sum = 0.0
        fds_sum = 0.0
        fds_px = 0
        no_valid = False
        eps_t = None
        xi = None
        view_ids = []

        for pick in picks:
            view = self._train_views[int(pick)]
            view_ids.append(view.view_id)
            cam = view.camera
            out = render_forward(self.cloud, cam, background_depth=self.background_depth)
            gt_color = torch.from_numpy(view.color).to(out.color.dtype)
            l1, dssim = photometric_terms(out.color, gt_color)
            term = (1.0 - weights.lambda_dssim) * l1 + weights.lambda_dssim * dssim
            l1_sum += float(l1.detach())
            dssim_sum += float(dssim.detach())

            if active:
                depth_det = out.depth.detach()
                alpha_det = out.alpha_acc.detach()
                mean_depth = mean_rendered_depth(depth_det, alpha_det)
                sampled = sample_view(cam, mean_depth, self.sampler, self.xi_rng)
                eps_t, xi = sampled.eps_t, sampled.xi
                with torch.no_grad():
                    render_forward(self.cloud, sampled.camera, background_depth=self.background_depth)
                radiance = radiance_flow(
                    out.depth, cam, sampled.camera, src_valid=alpha_det >= 1e-4
                )
                prior = prior_flow(
                    self.oracle, self.scene, view.view_id, sampled.camera,
                    seed=self.seed, iteration=iteration,
                )
                fds_term, count, flag = fds_loss_term(prior, radiance)
                term = term + weights.lambda_fds * fds_term
                fds_sum += float(fds_term.detach())
                fds_px += count
                no_valid = no_valid or flag

            total = term if total is None else total + term

        total = total / sched.batch_size
        loss_total = float(total.detach())
        if not math.isfinite(loss_total):
            raise NumericalDivergenceError(f"non-finite loss at iteration {iteration}")

        total.backward()
        grad_norms = {
            name: (float(p.grad.norm()) if p.grad is not None else 0.0)
            for name, p in self.cloud.named_parameters().items()
        }
        for group in self.optimizer.param_groups:
            if group["name"] == "mu":
                group["lr"] = self.mu_lr(iteration)
        self.optimizer.step()

        b = sched.batch_size
        return StepReport(
            iteration=iteration,
            loss_total=loss_total,
            loss_l1=l1_sum / b,
            loss_dssim=dssim_sum / b,
            loss_fds=(fds_sum / b) if active else None,
            eps_t=eps_t,
            xi=xi,
            view_ids=view_ids,
            fds_valid_px=fds_px if active else None,
            fds_no_valid=no_valid,
            grad_norms=grad_norms,
        )


@dataclass
class TrainResult:
    cloud: GaussianCloud
    rows: list[dict]
    run_dir: Path
    metrics_path: Path
    final_checkpoint: Path


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.12g}"


def _diagnostic_dump(run_dir: Path, iteration: int, cloud: GaussianCloud, message: str) -> None:
    stats = {}
    for name, p in cloud.named_parameters().items():
        arr = p.detach().numpy()
        finite = np.isfinite(arr)
        stats[name] = {
            "nonfinite": int((~finite).sum()),
            "min": float(arr[finite].min()) if finite.any() else None,
            "max": float(arr[finite].max()) if finite.any() else None,
        }
    with open(run_dir / "diagnostic.json", "w") as f:
        json.dump({"iteration": iteration, "message": message, "params": stats}, f, indent=1)
        f.write("\n")


def train(
    scene: LoadedScene,
    run_dir: str | Path,
    *,
    cloud: GaussianCloud | None = None,
    schedule: TrainSchedule | None = None,
    weights: LossWeights | None = None,
    sampler: SamplerConfig | None = None,
    oracle: OracleConfig | None = None,
    seed: int = 0,
    background_depth: float | None = None,
) -> TrainResult:
    """Run the full schedule, writing metrics.csv and checkpoints under run_dir.

    The cloud defaults to the scene's frozen initialization, so retraining a
    generated scene with the same settings reproduces the run exactly. Held-out
    metrics fall back to the train split when the scene has no test views.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cloud is None:
        cloud = init_cloud_from_manifest(scene)
    trainer = Trainer(
        scene, cloud,
        schedule=schedule, weights=weights, sampler=sampler, oracle=oracle,
        seed=seed, background_depth=background_depth,
    )
    sched = trainer.schedule
    eval_split = "test" if scene.test_views else "train"

    rows: list[dict] = []
    lines = [METRICS_HEADER]
    try:
        for it in range(sched.total_iters):
            report = trainer.step(it)
            done = it + 1
            is_last = done == sched.total_iters
            if sched.eval_every > 0 and (done % sched.eval_every == 0 or is_last):
                with torch.no_grad():
                    ev = evaluate(cloud, scene, split=eval_split, background_depth=trainer.background_depth)
                row = {
                    "iter": done,
                    "loss_total": report.loss_total,
                    "loss_l1": report.loss_l1,
                    "loss_dssim": report.loss_dssim,
                    "loss_fds": report.loss_fds,
                    "abs_rel": ev.mean_abs_rel,
                    "psnr": ev.mean_psnr,
                    "eps_t": report.eps_t,
                }
                rows.append(row)
                lines.append(
                    f"{done},{_fmt(report.loss_total)},{_fmt(report.loss_l1)},"
                    f"{_fmt(report.loss_dssim)},{_fmt(report.loss_fds)},"
                    f"{_fmt(ev.mean_abs_rel)},{_fmt(ev.mean_psnr)},{_fmt(report.eps_t)}"
                )
            if sched.checkpoint_every > 0 and done % sched.checkpoint_every == 0 and not is_last:
                save_checkpoint(cloud, run_dir / f"ckpt_{done:06d}.fdsgc")
    except NumericalDivergenceError as exc:
        (run_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
        _diagnostic_dump(run_dir, len(rows) and rows[-1]["iter"], cloud, str(exc))
        raise

    metrics_path = run_dir / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")
    final_path = run_dir / "final.fdsgc"
    save_checkpoint(cloud, final_path)
    return TrainResult(cloud=cloud, rows=rows, run_dir=run_dir, metrics_path=metrics_path, final_checkpoint=final_path)
