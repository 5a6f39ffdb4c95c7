"""Tests for evaluation metrics: Abs Rel, PSNR, whole-split evaluation, and
report serialization."""

import json

import numpy as np
import pytest
import torch

from flowsplat import (
    FloaterSpec,
    NoValidPixelsError,
    ShapeMismatchError,
    abs_rel,
    evaluate,
    generate_scene,
    init_cloud,
    psnr,
    write_report,
)
from flowsplat.metrics import PSNR_SENTINEL


class TestAbsRel:
    def test_ten_percent_error(self):
        gt = np.full((8, 8), 2.0)
        assert abs_rel(gt * 1.1, gt, np.ones_like(gt, dtype=bool)) == pytest.approx(0.1, rel=1e-12)

    def test_doubling_scores_one(self):
        gt = np.random.default_rng(0).uniform(1.0, 5.0, size=(8, 8))
        assert abs_rel(2.0 * gt, gt, np.ones_like(gt, dtype=bool)) == pytest.approx(1.0, rel=1e-12)

    def test_restricted_to_mask(self):
        gt = np.full((4, 4), 2.0)
        pred = gt.copy()
        pred[0, 0] = 4.0  # 100% error, but masked out
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        assert abs_rel(pred, gt, mask) == 0.0

    def test_empty_mask_rejected(self):
        gt = np.ones((4, 4))
        with pytest.raises(NoValidPixelsError):
            abs_rel(gt, gt, np.zeros((4, 4), dtype=bool))

    def test_nonpositive_gt_rejected(self):
        gt = np.ones((4, 4))
        gt[1, 1] = 0.0
        with pytest.raises(ValueError):
            abs_rel(gt, gt, np.ones((4, 4), dtype=bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            abs_rel(np.ones((4, 4)), np.ones((4, 5)), np.ones((4, 4), dtype=bool))


class TestPsnr:
    def test_known_values(self):
        gt = np.zeros((10, 10))
        # Uniform error e gives MSE e^2: 0.1 -> 20 dB, 0.01 -> 40 dB.
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, rel=1e-12)
        assert psnr(gt + 0.01, gt) == pytest.approx(40.0, rel=1e-12)

    def test_identical_images_hit_sentinel(self):
        img = np.random.default_rng(1).random((8, 8, 3))
        assert psnr(img, img) == PSNR_SENTINEL
        assert psnr(img + 9e-7, img) == PSNR_SENTINEL  # MSE 8.1e-13 < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            psnr(np.ones((8, 8)), np.ones((8, 9)))


@pytest.fixture(scope="module")
def plane_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("metrics_scene")
    scene = generate_scene(root / "scene", kind="plane", seed=0, n_train=3, n_test=2,
                           width=24, height=24, focal=30.0, n_points=400,
                           sigma_pos=0.0, floaters=FloaterSpec(count=0))
    cloud = init_cloud(scene, n_points=400, sigma_pos=0.0, floaters=FloaterSpec(count=0), seed=0)
    return scene, cloud


class TestEvaluate:
    def test_clean_init_scores_well_on_plane(self, plane_setup):
        scene, cloud = plane_setup
        report = evaluate(cloud, scene, split="test")
        assert report.split == "test"
        assert len(report.views) == 2
        # A dense noiseless surface init reconstructs the constant-depth
        # plane almost exactly.
        assert report.mean_abs_rel < 0.02
        # Color is untrained at init, so PSNR is only sanity-checked.
        assert report.mean_psnr > 10.0
        assert 0.0 < report.mean_ssim <= 1.0
        for row in report.views:
            assert row.valid_px > 0.8 * 24 * 24

    def test_means_are_view_averages(self, plane_setup):
        scene, cloud = plane_setup
        report = evaluate(cloud, scene, split="train")
        assert len(report.views) == 3
        assert report.mean_abs_rel == pytest.approx(np.mean([r.abs_rel for r in report.views]))
        assert report.mean_psnr == pytest.approx(np.mean([r.psnr for r in report.views]))
        assert report.mean_ssim == pytest.approx(np.mean([r.ssim for r in report.views]))

    def test_deterministic(self, plane_setup):
        scene, cloud = plane_setup
        a = evaluate(cloud, scene, split="test")
        b = evaluate(cloud, scene, split="test")
        assert a == b

    def test_unknown_split_rejected(self, plane_setup):
        scene, cloud = plane_setup
        with pytest.raises(ValueError):
            evaluate(cloud, scene, split="validation")


class TestWriteReport:
    def test_csv_and_json_round_trip(self, plane_setup, tmp_path):
        scene, cloud = plane_setup
        report = evaluate(cloud, scene, split="test")
        write_report(report, tmp_path)
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "view_id,abs_rel,psnr,ssim,valid_px"
        assert len(lines) == 1 + len(report.views) + 1
        assert lines[-1].startswith("mean,")
        first = lines[1].split(",")
        assert int(first[0]) == report.views[0].view_id
        assert float(first[1]) == pytest.approx(report.views[0].abs_rel, rel=1e-11)
        assert int(first[4]) == report.views[0].valid_px

        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["split"] == "test"
        assert payload["mean_abs_rel"] == pytest.approx(report.mean_abs_rel)
        assert len(payload["views"]) == len(report.views)

    def test_writing_twice_is_identical(self, plane_setup, tmp_path):
        scene, cloud = plane_setup
        report = evaluate(cloud, scene, split="test")
        write_report(report, tmp_path / "a")
        write_report(report, tmp_path / "b")
        assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()
        assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
