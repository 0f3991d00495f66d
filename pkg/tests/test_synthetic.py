"""Scene generator: cameras, ground-truth construction, self-consistency."""
import numpy as np
import pytest

from vlsplat.colormap import heatmap
from vlsplat.errors import InvalidParameterError
from vlsplat.query import BACKGROUND_LABEL, BACKGROUND_NORM_FLOOR, decode_labels
from vlsplat.rasterizer import IndicatorMode, RasterConfig, rasterize
from vlsplat.fusion import make_fusion_model
from vlsplat.synthetic import (
    SyntheticSpec,
    build_scene,
    look_at_camera,
)


@pytest.fixture(scope="module")
def plain_build():
    return build_scene(SyntheticSpec(n_objects=2, n_views=4, width=24, height=24, seed=5))


@pytest.fixture(scope="module")
def glare_build():
    return build_scene(
        SyntheticSpec(n_objects=3, n_views=8, width=32, height=32, seed=9, glare=True)
    )


# ---------------------------------------------------------------- cameras


def test_look_at_camera_recovers_eye_and_forward():
    eye = np.array([2.0, -1.5, 1.2])
    target = np.array([0.1, 0.3, -0.2])
    cam = look_at_camera(eye, target, 32, 32, 30.0, 30.0)
    rot = cam.rotation_matrix()
    # translation encodes t = -R @ eye
    assert np.allclose(-rot.T @ cam.translation, eye, atol=1e-12)
    forward = rot[2]
    want = (target - eye) / np.linalg.norm(target - eye)
    assert np.allclose(forward, want, atol=1e-12)
    # proper rotation
    assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)


def test_look_at_camera_straight_down_uses_fallback_up():
    cam = look_at_camera((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), 16, 16, 16.0, 16.0)
    rot = cam.rotation_matrix()
    assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(rot[2], [0.0, 0.0, -1.0], atol=1e-12)


def test_camera_principal_point_centered():
    cam = look_at_camera((3.0, 0.0, 1.0), (0.0, 0.0, 0.0), 20, 14, 18.0, 18.0)
    assert cam.cx == (20 - 1) / 2.0
    assert cam.cy == (14 - 1) / 2.0


# ---------------------------------------------------------------- spec


def test_spec_validation():
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(n_views=1).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(width=8).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(n_objects=-1).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(n_objects=3, labels=("a", "b")).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(gaussians_per_object=0).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(n_objects=7).validate()  # default palette has six entries
    SyntheticSpec(n_objects=7, labels=tuple("abcdefg")).validate()
    SyntheticSpec(n_objects=6).validate()
    SyntheticSpec().validate()


def test_spec_custom_labels_respected():
    build = build_scene(
        SyntheticSpec(n_objects=2, n_views=2, width=16, height=16, seed=1, labels=("cup", "vase"))
    )
    assert build.labels == ["cup", "vase"]
    assert build.queries.labels == ["cup", "vase"]


# ---------------------------------------------------------------- gt cloud


def test_gt_cloud_layout(plain_build):
    build = plain_build
    n_obj = 2 * 40
    assert build.gt_cloud.n == n_obj
    assert build.tangible.all()
    assert set(build.owners.tolist()) == {0, 1}
    # one-hot features per owner
    expected = np.zeros((n_obj, 2))
    expected[np.arange(n_obj), build.owners] = 1.0
    assert np.array_equal(build.gt_cloud.features, expected)
    # queries are the identity basis
    assert np.array_equal(build.queries.embeddings, np.eye(2))


def test_init_cloud_is_uninformed(plain_build):
    init = plain_build.init_cloud
    gt = plain_build.gt_cloud
    assert init.n == gt.n + round(0.25 * gt.n)
    assert np.all(init.opacities() == init.opacities()[0])
    assert np.all(init.indicator_logits == 0.0)
    # features carry no class structure at start
    assert np.max(np.abs(init.features)) < 1.0


def test_build_scene_is_deterministic():
    spec = SyntheticSpec(n_objects=2, n_views=2, width=16, height=16, seed=11)
    a, b = build_scene(spec), build_scene(spec)
    assert np.array_equal(a.gt_cloud.positions, b.gt_cloud.positions)
    assert np.array_equal(a.init_cloud.features, b.init_cloud.features)
    for img_a, img_b in zip(a.images, b.images):
        assert np.array_equal(img_a, img_b)
    for lm_a, lm_b in zip(a.label_maps, b.label_maps):
        assert np.array_equal(lm_a, lm_b)


# ---------------------------------------------------------------- annotations


def test_label_maps_match_eval_decode_bitwise(plain_build):
    # The stored label maps must be exactly what the evaluation path decodes
    # from a ground-truth render, or a GT checkpoint could never score 1.0.
    build = plain_build
    fusion = make_fusion_model("self", 3, len(build.labels), 4, np.random.default_rng(0))
    cfg = RasterConfig.quality()
    for cam, stored in zip(build.cameras, build.label_maps):
        out = rasterize(build.gt_cloud, cam, fusion, IndicatorMode("dual"), cfg, channels="semantics")
        decoded = decode_labels(out.semantics, build.queries, BACKGROUND_NORM_FLOOR)
        assert np.array_equal(decoded, stored)


def test_feature_maps_are_hard_one_hot(plain_build):
    build = plain_build
    for fmap, lmap in zip(build.feature_maps, build.label_maps):
        norms = np.linalg.norm(fmap, axis=2)
        assert np.array_equal(norms > 0, lmap != BACKGROUND_LABEL)
        labeled = lmap != BACKGROUND_LABEL
        assert np.allclose(norms[labeled], 1.0)
        picked = np.argmax(fmap, axis=2)
        assert np.array_equal(picked[labeled], lmap[labeled])


def test_boxes_match_label_maps(plain_build):
    build = plain_build
    for lmap, frame_boxes in zip(build.label_maps, build.boxes):
        for name, (x0, y0, x1, y1) in frame_boxes.items():
            k = build.labels.index(name)
            rows, cols = np.nonzero(lmap == k)
            assert rows.size > 0
            assert (cols.min(), rows.min(), cols.max(), rows.max()) == (x0, y0, x1, y1)


def test_feature_noise_perturbs_stored_maps_only():
    clean_spec = SyntheticSpec(n_objects=2, n_views=3, width=16, height=16, seed=7)
    noisy_spec = SyntheticSpec(
        n_objects=2, n_views=3, width=16, height=16, seed=7, feature_noise=0.05
    )
    clean, noisy = build_scene(clean_spec), build_scene(noisy_spec)
    # supervision gets the noise; evaluation targets and the clouds do not
    assert all(not np.array_equal(a, b) for a, b in zip(clean.feature_maps, noisy.feature_maps))
    assert all(np.array_equal(a, b) for a, b in zip(clean.label_maps, noisy.label_maps))
    assert np.array_equal(clean.gt_cloud.positions, noisy.gt_cloud.positions)
    assert np.array_equal(clean.init_cloud.features, noisy.init_cloud.features)
    assert clean.boxes == noisy.boxes
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(feature_noise=-0.1).validate()


def _eye_angles(cameras):
    angles = []
    for cam in cameras:
        eye = -cam.rotation_matrix().T @ cam.translation
        angles.append(np.arctan2(eye[1], eye[0]))
    return np.array(angles)


def test_camera_arc_is_endpoint_inclusive_sweep():
    build = build_scene(
        SyntheticSpec(n_objects=1, n_views=4, width=16, height=16, seed=3, camera_arc_degrees=60.0)
    )
    got = np.degrees(_eye_angles(build.cameras))
    assert np.allclose(got, [-30.0, -10.0, 10.0, 30.0], atol=1e-9)


def test_camera_full_ring_is_open_ended():
    build = build_scene(SyntheticSpec(n_objects=1, n_views=4, width=16, height=16, seed=3))
    wrapped = np.mod(np.degrees(_eye_angles(build.cameras)) + 180.0, 360.0) - 180.0
    assert np.allclose(np.sort(wrapped), [-180.0, -90.0, 0.0, 90.0], atol=1e-9)
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(camera_arc_degrees=0.0).validate()
    with pytest.raises(InvalidParameterError):
        SyntheticSpec(camera_arc_degrees=361.0).validate()
    SyntheticSpec(camera_arc_degrees=360.0).validate()


# ---------------------------------------------------------------- glare


def test_glare_gaussians_stay_under_opacity_ceiling(glare_build):
    build = glare_build
    glare_rows = ~build.tangible
    assert glare_rows.sum() == 3 * 12
    assert np.all(build.gt_cloud.opacities()[glare_rows] < 0.3)
    # glare carries a near-zero semantic indicator in the ground truth
    assert np.all(build.gt_cloud.indicators()[glare_rows] < 0.05)
    assert np.all(build.gt_cloud.indicators()[~glare_rows] > 0.9)


def test_glare_floats_over_host_in_some_view(glare_build):
    # the generator asserts this internally; double-check one view directly
    build = glare_build
    hits = 0
    for k in range(3):
        rows = np.nonzero(~build.tangible & (build.owners == k))[0]
        center = build.gt_cloud.positions[rows].mean(axis=0)
        for cam, lmap in zip(build.cameras, build.label_maps):
            rot = cam.rotation_matrix()
            p = rot @ center + cam.translation
            if p[2] <= 0.01:
                continue
            col = int(round(cam.fx * p[0] / p[2] + cam.cx))
            row = int(round(cam.fy * p[1] / p[2] + cam.cy))
            if 0 <= row < cam.height and 0 <= col < cam.width and lmap[row, col] == k:
                hits += 1
                break
    assert hits >= 1


# ---------------------------------------------------------------- colormap


def test_heatmap_endpoints_and_shape():
    values = np.linspace(0.0, 1.0, 256).reshape(16, 16)
    img = heatmap(values)
    assert img.shape == (16, 16, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    flat = img.reshape(-1, 3)
    # low values map to the cold end (blue dominant), high to the warm end
    assert flat[0][2] > flat[0][0]
    assert flat[-1][0] > flat[-1][2]


def test_heatmap_constant_input_is_cold():
    img = heatmap(np.full((4, 4), 0.7))
    assert np.all(img == img[0, 0])
    assert img[0, 0, 2] >= img[0, 0, 0]
