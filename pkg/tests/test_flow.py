"""Tests for flow fields: reprojection flow, the closed-form translation
solution, endpoint error, round-trip consistency, and .flo serialization."""

import struct

import numpy as np
import pytest
import torch

from flowsplat import (
    BadMagicError,
    Camera,
    FlowField,
    NonZeroT3Error,
    NoValidPixelsError,
    RigidTransform,
    ShapeMismatchError,
    TruncatedFileError,
    endpoint_error,
    pure_translation_flow,
    radiance_flow,
    read_flo,
    roundtrip_displacement,
    write_flo,
)
from flowsplat.flow import FLO_MAGIC
from flowsplat.geometry import quaternion_to_rotation


def make_camera(pose=None, f=100.0, width=64, height=64):
    if pose is None:
        pose = RigidTransform.identity()
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height, pose=pose,
    )


def random_pose(rng):
    q = rng.normal(size=4)
    rot = quaternion_to_rotation(q)
    return RigidTransform(rot, rng.uniform(-0.2, 0.2, size=3))


def translated_camera(cam, t):
    """Camera whose pose differs from cam by a camera-frame translation t."""
    pose = RigidTransform(cam.pose.rotation, cam.pose.translation + np.asarray(t))
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height, pose=pose)


def constant_field(h, w, du, dv, valid=None):
    if valid is None:
        valid = torch.ones((h, w), dtype=torch.bool)
    return FlowField(
        torch.full((h, w), du, dtype=torch.float64),
        torch.full((h, w), dv, dtype=torch.float64),
        valid,
    )


class TestFlowField:
    def test_component_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            FlowField(torch.zeros(4, 4), torch.zeros(4, 5), torch.ones(4, 4, dtype=torch.bool))
        with pytest.raises(ShapeMismatchError):
            FlowField(torch.zeros(4), torch.zeros(4), torch.ones(4, dtype=torch.bool))

    def test_zeros_constructor(self):
        f = FlowField.zeros(3, 5)
        assert f.shape == (3, 5)
        assert torch.equal(f.du, torch.zeros(3, 5, dtype=torch.float64))
        assert torch.equal(f.dv, torch.zeros(3, 5, dtype=torch.float64))
        assert bool(f.valid.all())

    def test_valid_coerced_to_bool(self):
        f = FlowField(torch.zeros(2, 2), torch.zeros(2, 2), np.array([[1, 0], [0, 1]]))
        assert f.valid.dtype == torch.bool
        assert f.valid.sum().item() == 2

    def test_detach_breaks_graph(self):
        du = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
        f = FlowField(du + 1.0, du * 2.0, torch.ones(2, 2, dtype=torch.bool))
        assert f.du.requires_grad
        d = f.detach()
        assert not d.du.requires_grad and not d.dv.requires_grad


class TestRadianceFlow:
    def test_same_camera_gives_zero_flow(self):
        cam = make_camera()
        depth = torch.full((64, 64), 2.5, dtype=torch.float64)
        flow = radiance_flow(depth, cam, cam)
        assert bool(flow.valid.all())
        assert flow.du.abs().max().item() < 1e-12
        assert flow.dv.abs().max().item() < 1e-12

    def test_known_translation_displacement(self):
        # A camera shifted by t1 along x sees every point of a fronto-parallel
        # plane displaced by fx * t1 / depth pixels.
        cam = make_camera()
        depth = torch.full((64, 64), 2.0, dtype=torch.float64)
        flow = radiance_flow(depth, cam, translated_camera(cam, (0.1, 0.0, 0.0)))
        inner = flow.valid
        assert bool(inner.any())
        expected = 100.0 * 0.1 / 2.0
        assert torch.allclose(flow.du[inner], torch.tensor(expected, dtype=torch.float64))
        assert flow.dv[inner].abs().max().item() < 1e-12

    def test_nonpositive_depth_invalid_with_zero_flow(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        depth[3, 4] = 0.0
        depth[5, 1] = -1.0
        flow = radiance_flow(depth, cam, translated_camera(cam, (0.01, 0.0, 0.0)))
        assert not flow.valid[3, 4] and not flow.valid[5, 1]
        assert flow.du[3, 4].item() == 0.0 and flow.dv[3, 4].item() == 0.0
        assert flow.du[5, 1].item() == 0.0 and flow.dv[5, 1].item() == 0.0

    def test_src_valid_mask_excludes_pixels(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        src_valid = torch.ones(8, 8, dtype=torch.bool)
        src_valid[0, 0] = False
        flow = radiance_flow(depth, cam, cam, src_valid=src_valid)
        assert not flow.valid[0, 0]
        assert flow.valid.sum().item() == 63

    def test_target_behind_camera_invalid(self):
        # The target camera looks the opposite way, so every reprojected point
        # lands behind it.
        cam = make_camera(width=8, height=8)
        flip = RigidTransform(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
        cam_n = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                       width=8, height=8, pose=flip)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        flow = radiance_flow(depth, cam, cam_n)
        assert not bool(flow.valid.any())
        assert flow.du.abs().max().item() == 0.0

    def test_out_of_frame_reprojection_invalid(self):
        # 30 px of rightward flow pushes the right part of the image outside
        # the target frame: valid iff u + 30 < width - 0.5.
        cam = make_camera()
        depth = torch.full((64, 64), 2.0, dtype=torch.float64)
        flow = radiance_flow(depth, cam, translated_camera(cam, (0.6, 0.0, 0.0)))
        du = 100.0 * 0.6 / 2.0
        cols_valid = np.arange(64) + du < 63.5
        assert np.array_equal(flow.valid.numpy(), np.tile(cols_valid, (64, 1)))

    def test_depth_shape_mismatch_rejected(self):
        cam = make_camera(width=8, height=8)
        with pytest.raises(ShapeMismatchError):
            radiance_flow(torch.ones(8, 9, dtype=torch.float64), cam, cam)

    def test_gradient_wrt_depth_matches_closed_form(self):
        # du = fx * t1 / d at each pixel, so d(du)/d(depth) = -fx * t1 / d^2.
        cam = make_camera(width=16, height=16)
        depth = torch.full((16, 16), 2.0, dtype=torch.float64, requires_grad=True)
        flow = radiance_flow(depth, cam, translated_camera(cam, (0.02, 0.0, 0.0)))
        flow.du[7, 9].backward()
        grad = depth.grad[7, 9].item()
        expected = -100.0 * 0.02 / 2.0**2
        assert grad == pytest.approx(expected, rel=1e-9)
        # Every other pixel's depth is independent of this output.
        other = depth.grad.clone()
        other[7, 9] = 0.0
        assert other.abs().max().item() == 0.0

    def test_gradient_wrt_depth_matches_finite_difference(self):
        rng = np.random.default_rng(11)
        cam = make_camera(width=12, height=12)
        base = rng.uniform(1.5, 3.0, size=(12, 12))
        pose_n = RigidTransform(
            quaternion_to_rotation(np.array([1.0, 0.01, -0.02, 0.015])),
            np.array([0.03, -0.02, 0.01]),
        )
        cam_n = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                       width=12, height=12, pose=pose_n)
        depth = torch.tensor(base, requires_grad=True)
        flow = radiance_flow(depth, cam, cam_n)
        loss = flow.du[flow.valid].sum() + flow.dv[flow.valid].sum()
        loss.backward()
        h = 1e-6
        for (i, j) in [(2, 3), (7, 7), (10, 1)]:
            def total(d_ij):
                d = torch.tensor(base)
                d[i, j] = d_ij
                f = radiance_flow(d, cam, cam_n)
                return (f.du[f.valid].sum() + f.dv[f.valid].sum()).item()
            fd = (total(base[i, j] + h) - total(base[i, j] - h)) / (2 * h)
            assert depth.grad[i, j].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_invalid_pixels_get_zero_gradient(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        depth[4, 4] = 0.0
        depth.requires_grad_(True)
        flow = radiance_flow(depth, cam, translated_camera(cam, (0.01, 0.0, 0.0)))
        (flow.du.sum() + flow.dv.sum()).backward()
        assert depth.grad[4, 4].item() == 0.0


class TestClosedFormTranslation:
    def test_matches_general_reprojection(self):
        # The closed form must agree with full reprojection through a camera
        # translated in its own image plane; the acceptance suite sweeps 100
        # fixtures, this is the unit-level version.
        rng = np.random.default_rng(20250814)
        for _ in range(5):
            cam = make_camera(pose=random_pose(rng), width=32, height=32)
            depth = torch.tensor(rng.uniform(1.0, 5.0, size=(32, 32)))
            t = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.0])
            closed = pure_translation_flow(depth, cam, t)
            general = radiance_flow(depth, cam, translated_camera(cam, t))
            assert torch.equal(closed.valid, general.valid)
            m = closed.valid
            assert (closed.du[m] - general.du[m]).abs().max().item() < 1e-9
            assert (closed.dv[m] - general.dv[m]).abs().max().item() < 1e-9

    def test_depth_translation_rejected(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        with pytest.raises(NonZeroT3Error):
            pure_translation_flow(depth, cam, (0.01, 0.0, 1e-6))
        # At or below the tolerance the component counts as zero.
        flow = pure_translation_flow(depth, cam, (0.01, 0.0, 1e-13))
        assert bool(flow.valid.any())

    def test_translation_shape_rejected(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        with pytest.raises(ShapeMismatchError):
            pure_translation_flow(depth, cam, (0.01, 0.0))

    def test_linear_in_translation(self):
        # Doubling t doubles the flow bitwise (multiplication by 2 is exact).
        rng = np.random.default_rng(3)
        cam = make_camera(width=32, height=32)
        depth = torch.tensor(rng.uniform(1.0, 4.0, size=(32, 32)))
        t = np.array([1e-3, 2e-3, 0.0])
        one = pure_translation_flow(depth, cam, t)
        two = pure_translation_flow(depth, cam, 2.0 * t)
        assert torch.equal(one.valid, two.valid)
        assert torch.equal(2.0 * one.du, two.du)
        assert torch.equal(2.0 * one.dv, two.dv)

    def test_magnitude_is_focal_times_parallax_over_depth(self):
        # f = 100, depth = 2, |t| = 0.46 in-plane: 23 px of flow at every
        # pixel that stays inside the target frame (u + 23 < 63.5).
        cam = make_camera()
        depth = torch.full((64, 64), 2.0, dtype=torch.float64)
        flow = pure_translation_flow(depth, cam, (0.46, 0.0, 0.0))
        mags = torch.hypot(flow.du, flow.dv)[flow.valid]
        assert torch.allclose(mags, torch.tensor(23.0, dtype=torch.float64))
        assert flow.valid.sum().item() == 41 * 64

    def test_invalid_depth_handling_matches_general(self):
        cam = make_camera(width=8, height=8)
        depth = torch.full((8, 8), 2.0, dtype=torch.float64)
        depth[2, 2] = -1.0
        src_valid = torch.ones(8, 8, dtype=torch.bool)
        src_valid[5, 5] = False
        flow = pure_translation_flow(depth, cam, (0.001, 0.0, 0.0), src_valid=src_valid)
        assert not flow.valid[2, 2] and not flow.valid[5, 5]
        assert flow.du[2, 2].item() == 0.0 and flow.du[5, 5].item() == 0.0


class TestEndpointError:
    def test_three_four_five(self):
        a = constant_field(8, 8, 3.0, 4.0)
        b = constant_field(8, 8, 0.0, 0.0)
        mean, err_map = endpoint_error(a, b)
        assert mean == 5.0
        assert np.all(err_map == 5.0)

    def test_restricted_to_joint_validity(self):
        va = torch.zeros(4, 4, dtype=torch.bool)
        va[:, :2] = True  # left half
        vb = torch.zeros(4, 4, dtype=torch.bool)
        vb[:2, :] = True  # top half
        a = constant_field(4, 4, 1.0, 0.0, valid=va)
        b = constant_field(4, 4, 0.0, 0.0, valid=vb)
        mean, err_map = endpoint_error(a, b)
        joint = (va & vb).numpy()
        assert mean == 1.0
        assert np.all(err_map[joint] == 1.0)
        assert np.all(np.isnan(err_map[~joint]))

    def test_disjoint_masks_rejected(self):
        va = torch.zeros(4, 4, dtype=torch.bool)
        va[0, 0] = True
        vb = torch.zeros(4, 4, dtype=torch.bool)
        vb[3, 3] = True
        with pytest.raises(NoValidPixelsError):
            endpoint_error(constant_field(4, 4, 1.0, 0.0, valid=va),
                           constant_field(4, 4, 0.0, 0.0, valid=vb))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            endpoint_error(constant_field(4, 4, 0.0, 0.0), constant_field(4, 5, 0.0, 0.0))


class TestRoundtripDisplacement:
    def test_zero_flows_give_zero_residual(self):
        res, mask = roundtrip_displacement(FlowField.zeros(6, 6), FlowField.zeros(6, 6))
        # Bilinear lookup needs a full 2x2 neighborhood, so the last row and
        # column fall outside the interpolation grid.
        assert mask[:5, :5].all() and not mask[5, :].any() and not mask[:, 5].any()
        assert np.all(res[mask] == 0.0)
        assert np.all(np.isnan(res[~mask]))

    def test_consistent_pair_cancels(self):
        fwd = constant_field(8, 8, 0.5, 0.25)
        bwd = constant_field(8, 8, -0.5, -0.25)
        res, mask = roundtrip_displacement(fwd, bwd)
        assert bool(mask.any())
        assert np.abs(res[mask]).max() < 1e-12

    def test_inconsistent_pair_measured(self):
        fwd = constant_field(8, 8, 1.0, 0.0)
        bwd = constant_field(8, 8, 0.0, 0.0)
        res, mask = roundtrip_displacement(fwd, bwd)
        assert np.all(res[mask] == 1.0)

    def test_invalid_corner_masks_neighbours(self):
        fwd = FlowField.zeros(6, 6)
        vb = torch.ones(6, 6, dtype=torch.bool)
        vb[3, 3] = False
        bwd = FlowField(torch.zeros(6, 6, dtype=torch.float64),
                        torch.zeros(6, 6, dtype=torch.float64), vb)
        res, mask = roundtrip_displacement(fwd, bwd)
        for (i, j) in [(2, 2), (2, 3), (3, 2), (3, 3)]:
            assert not mask[i, j]
        assert mask[0, 0] and mask[4, 4]


class TestFloFormat:
    def make_field(self, rng, h=9, w=13):
        du = torch.tensor(rng.normal(size=(h, w)))
        dv = torch.tensor(rng.normal(size=(h, w)))
        valid = torch.tensor(rng.random(size=(h, w)) > 0.3)
        return FlowField(du, dv, valid)

    def test_rewrite_is_byte_exact(self, tmp_path):
        field = self.make_field(np.random.default_rng(0))
        p1 = tmp_path / "a.flo"
        p2 = tmp_path / "b.flo"
        write_flo(field, p1)
        write_flo(read_flo(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_and_mask_survive_roundtrip(self, tmp_path):
        field = self.make_field(np.random.default_rng(1))
        path = tmp_path / "f.flo"
        write_flo(field, path)
        back = read_flo(path)
        assert torch.equal(back.valid, field.valid)
        m = field.valid
        assert torch.equal(back.du[m], field.du[m].to(torch.float32).to(torch.float64))
        assert torch.equal(back.dv[m], field.dv[m].to(torch.float32).to(torch.float64))
        # Invalid pixels carry the sentinel magnitude.
        assert torch.all(back.du[~m] == 1e10)
        assert torch.all(back.dv[~m] == 1e10)

    def test_frozen_file_layout(self, tmp_path):
        field = FlowField(
            torch.tensor([[1.5, 2.5]], dtype=torch.float64),
            torch.tensor([[-0.25, 7.0]], dtype=torch.float64),
            torch.tensor([[True, False]]),
        )
        path = tmp_path / "tiny.flo"
        write_flo(field, path)
        raw = path.read_bytes()
        assert len(raw) == 12 + 2 * 2 * 4
        expected = struct.pack("<fii", FLO_MAGIC, 2, 1)
        expected += struct.pack("<4f", 1.5, -0.25, 1e10, 1e10)
        assert raw == expected

    def test_large_magnitudes_read_as_invalid(self, tmp_path):
        path = tmp_path / "big.flo"
        payload = struct.pack("<fii", FLO_MAGIC, 2, 1) + struct.pack("<4f", 2e9, 0.0, 1.0, 1.0)
        path.write_bytes(payload)
        back = read_flo(path)
        assert not back.valid[0, 0] and back.valid[0, 1]
        assert back.du[0, 0].item() == pytest.approx(2e9)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(struct.pack("<fii", 1234.5, 1, 1) + b"\x00" * 8)
        with pytest.raises(BadMagicError):
            read_flo(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "short.flo"
        path.write_bytes(struct.pack("<f", FLO_MAGIC) + b"\x01\x00")
        with pytest.raises(TruncatedFileError):
            read_flo(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "cut.flo"
        path.write_bytes(struct.pack("<fii", FLO_MAGIC, 4, 4) + b"\x00" * 10)
        with pytest.raises(TruncatedFileError):
            read_flo(path)

    def test_nonsensical_size_rejected(self, tmp_path):
        for (w, h) in [(0, 4), (4, -1)]:
            path = tmp_path / f"size_{w}_{h}.flo"
            path.write_bytes(struct.pack("<fii", FLO_MAGIC, w, h))
            with pytest.raises(TruncatedFileError):
                read_flo(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "extra.flo"
        payload = struct.pack("<fii", FLO_MAGIC, 1, 1) + struct.pack("<2f", 0.0, 0.0) + b"xx"
        path.write_bytes(payload)
        with pytest.raises(ValueError):
            read_flo(path)
