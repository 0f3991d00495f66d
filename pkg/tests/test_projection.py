"""EWA projection: frozen scalar cases, culling, sorting, and an independent
finite-difference oracle for the analytic screen-space Jacobians."""
import math

import numpy as np
import pytest

from conftest import make_camera, random_cloud
from vlsplat.projection import (
    COV2D_DILATION,
    ProjectedGaussian,
    gaussian_weight,
    project,
    project_backward,
    project_batch,
)
from vlsplat.scene import GaussianCloud, logit


def single_gaussian_cloud(position, log_scale=None, rotation=None):
    return GaussianCloud(
        positions=np.asarray(position, dtype=np.float64).reshape(1, 3),
        log_scales=np.zeros((1, 3)) if log_scale is None else np.asarray(log_scale).reshape(1, 3),
        rotations=np.array([[1.0, 0, 0, 0]]) if rotation is None else np.asarray(rotation).reshape(1, 4),
        opacity_logits=np.array([logit(0.5)]),
        colors=np.full((1, 3), 0.5),
        features=np.zeros((1, 3)),
        indicator_logits=np.array([logit(0.5)]),
    )


class TestProjectFrozenCases:
    def test_on_axis_point(self):
        # conftest centers cx at (w-1)/2; this case wants cx=cy=50 exactly
        base = make_camera(width=100, height=100, fx=100, fy=100)
        cam = type(base)(
            fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100,
            rotation=base.rotation, translation=base.translation,
        )
        out = project(single_gaussian_cloud([0.0, 0.0, 1.0], log_scale=np.log([0.01] * 3)), cam)
        assert len(out) == 1
        assert np.allclose(out[0].mean2d, (50.0, 50.0), atol=1e-12)
        assert out[0].depth == pytest.approx(1.0)

    def test_isotropic_covariance(self):
        sigma, z = 0.2, 4.0
        cam = make_camera(width=64, height=64, fx=80, fy=60)
        out = project(single_gaussian_cloud([0.0, 0.0, z], log_scale=np.log([sigma] * 3)), cam)
        expected = np.diag([(80 * sigma / z) ** 2, (60 * sigma / z) ** 2]) + COV2D_DILATION * np.eye(2)
        assert np.allclose(out[0].cov2d, expected, rtol=1e-10, atol=1e-10)

    def test_behind_camera_culled(self):
        cam = make_camera()
        assert project(single_gaussian_cloud([0.0, 0.0, -2.0]), cam) == []

    def test_near_plane_culled(self):
        cam = make_camera()
        assert project(single_gaussian_cloud([0.0, 0.0, 0.005]), cam) == []

    def test_off_screen_culled(self):
        cam = make_camera(width=16, height=16)
        out = project(single_gaussian_cloud([50.0, 0.0, 3.0], log_scale=np.log([0.05] * 3)), cam)
        assert out == []


class TestGaussianWeight:
    def pg(self, cov):
        return ProjectedGaussian(
            index=0, mean2d=np.zeros(2), cov2d=np.asarray(cov, dtype=np.float64),
            depth=1.0, radius=3.0,
        )

    def test_peak_is_one(self):
        assert gaussian_weight([0.0, 0.0], self.pg(np.eye(2))) == 1.0

    def test_unit_distance_identity_cov(self):
        assert gaussian_weight([1.0, 0.0], self.pg(np.eye(2))) == pytest.approx(math.exp(-0.5))

    def test_anisotropic_case(self):
        assert gaussian_weight([2.0, 0.0], self.pg(np.diag([4.0, 1.0]))) == pytest.approx(math.exp(-0.5))

    def test_bounded_and_decreasing_along_ray(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 2))
        pg = self.pg(a @ a.T + 0.3 * np.eye(2))
        direction = rng.normal(size=2)
        values = [gaussian_weight(t * direction, pg) for t in np.linspace(0, 5, 12)]
        assert all(0 < v <= 1 for v in values)
        assert all(values[i] > values[i + 1] for i in range(len(values) - 1))


class TestBatchOrdering:
    def test_depth_sorted_with_index_ties(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 12)
        cloud.positions[3, 2] = cloud.positions[7, 2] = 4.0  # exact depth tie
        batch, _ = project_batch(cloud, make_camera())
        depths = batch.depths
        assert np.all(np.diff(depths) >= 0)
        tied = [int(i) for i, d in zip(batch.indices, depths) if d == 4.0]
        assert tied == sorted(tied)

    def test_bboxes_inside_image_and_nonempty(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 30)
        cam = make_camera(width=20, height=14)
        batch, _ = project_batch(cloud, cam)
        for r0, r1, c0, c1 in batch.bboxes:
            assert 0 <= r0 <= r1 <= cam.height - 1
            assert 0 <= c0 <= c1 <= cam.width - 1

    def test_unbounded_footprint_covers_image(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 5)
        cam = make_camera(width=9, height=7)
        batch, _ = project_batch(cloud, cam, footprint_sigma=math.inf)
        assert np.all(batch.bboxes == np.array([0, cam.height - 1, 0, cam.width - 1]))

    def test_inverse_covariance_is_exact_inverse(self):
        rng = np.random.default_rng(4)
        batch, _ = project_batch(random_cloud(rng, 10), make_camera())
        for cov, inv in zip(batch.covs2d, batch.inv_covs2d):
            assert np.allclose(cov @ inv, np.eye(2), atol=1e-10)
            assert inv[0, 1] == inv[1, 0]  # built symmetric, bitwise


class TestProjectionBackward:
    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(5)
        cam = make_camera(
            width=16, height=16,
            rotation=np.array([0.9, 0.1, -0.2, 0.15]) / np.linalg.norm([0.9, 0.1, -0.2, 0.15]),
            translation=np.array([0.1, -0.2, 0.3]),
        )
        cloud = random_cloud(rng, 6)
        batch, cache = project_batch(cloud, cam, footprint_sigma=math.inf)
        m = len(batch)
        assert m == 6, "test setup expects every Gaussian retained"
        d_means = rng.normal(size=(m, 2))
        d_covs = rng.normal(size=(m, 2, 2))

        def objective():
            b, _ = project_batch(cloud, cam, footprint_sigma=math.inf)
            return float(np.sum(d_means * b.means2d) + np.sum(d_covs * b.covs2d))

        d_pos, d_log_s, d_rot = project_backward(cache, d_means, d_covs)
        analytic = {"positions": np.zeros((6, 3)), "log_scales": np.zeros((6, 3)), "rotations": np.zeros((6, 4))}
        analytic["positions"][batch.indices] = d_pos
        analytic["log_scales"][batch.indices] = d_log_s
        analytic["rotations"][batch.indices] = d_rot

        eps = 1e-5
        for name in ("positions", "log_scales", "rotations"):
            arr = getattr(cloud, name)
            fd = np.zeros_like(arr)
            flat, fdflat = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                hi = objective()
                flat[i] = keep - eps
                lo = objective()
                flat[i] = keep
                fdflat[i] = (hi - lo) / (2 * eps)
            err = np.abs(analytic[name] - fd)
            tol = 1e-6 + 1e-4 * np.abs(fd)
            assert np.all(err <= tol), f"{name}: max err {err.max():.3e}"

    def test_empty_cloud(self):
        batch, cache = project_batch(GaussianCloud.empty(), make_camera())
        assert len(batch) == 0
        d_pos, d_log_s, d_rot = project_backward(cache, np.zeros((0, 2)), np.zeros((0, 2, 2)))
        assert d_pos.shape == (0, 3)
