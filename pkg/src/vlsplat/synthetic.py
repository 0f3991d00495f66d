"""Synthetic labeled desk scene: colored Gaussian clusters on a ring, viewed
from a circle of cameras, with exact ground-truth annotations.

Each object is a cluster of Gaussians sharing a base color and an
orthonormal label embedding. The optional glare clusters emulate intangible
lighting effects: bright, low-opacity (< 0.3) blobs floating radially
outward of their host object so that, from cameras on that side, they hang
in front of the host. Their ground-truth indicator is near zero, so GT
semantics pass through them; a model that reuses color opacity for the
language chain smears their features across the host and the background.

Ground truth per view:
  * the image, rendered from the GT parameters by the reference rasterizer;
  * the label map, decoded from a threshold-free semantic render of the GT
    parameters exactly the way evaluation decodes label maps (argmax of
    per-pixel language weights; feature norm below the background floor ->
    background), which makes GT-checkpoint evaluation self-consistent;
  * the GT feature map, the hard per-pixel embedding of that label map;
  * per-label bounding boxes of the label-map pixels.

Everything is a pure function of (spec, seed): two runs write identical
bytes.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .dataset_io import (
    CheckpointState,
    camera_to_dict,
    save_checkpoint,
    write_image,
    write_json,
    write_tensor,
)
from .errors import InvalidParameterError, InvalidStateError
from .fusion import ATTN_DIM_DEFAULT, make_fusion_model
from .projection import Z_NEAR
from .query import BACKGROUND_LABEL, BACKGROUND_NORM_FLOOR, QuerySet, decode_labels
from .rasterizer import COLOR_DIM, IndicatorMode, RasterConfig, rasterize, rasterize_reference
from .scene import Camera, GaussianCloud, logit, rotmat_to_quat

PALETTE = (
    ("red_ball", (0.85, 0.15, 0.15)),
    ("green_ball", (0.15, 0.80, 0.20)),
    ("blue_ball", (0.20, 0.25, 0.85)),
    ("yellow_ball", (0.85, 0.80, 0.15)),
    ("magenta_ball", (0.80, 0.15, 0.80)),
    ("cyan_ball", (0.15, 0.80, 0.80)),
)
PAD_LABELS = ("void", "backdrop")
GLARE_COLOR = (0.97, 0.95, 0.82)

OBJECT_RING_RADIUS = 1.1
CAMERA_RING_RADIUS = 3.2
CAMERA_HEIGHT = 1.3
GLARE_TOWARD_OFFSET = 0.55
GLARE_HEIGHT_OFFSET = 0.12


@dataclasses.dataclass
class SyntheticSpec:
    n_objects: int = 3
    n_views: int = 12
    width: int = 64
    height: int = 64
    seed: int = 7
    glare: bool = False
    labels: tuple | None = None  # object label names; defaults to the palette
    gaussians_per_object: int = 40
    gaussians_per_glare: int = 12
    init_position_jitter: float = 0.08
    init_distractor_ratio: float = 0.25
    # Std-dev of Gaussian noise added per view to the stored feature maps.
    # Real per-view feature maps come from a 2D encoder and are never
    # view-consistent; this reproduces that regime. Label maps, boxes, and
    # the GT cloud stay clean, so evaluation targets are unaffected.
    feature_noise: float = 0.0
    # Angular coverage of the camera ring. 360 is a closed orbit; smaller
    # values give a capture sweep (endpoints included), which keeps view
    # pairs angularly close the way real handheld datasets do.
    camera_arc_degrees: float = 360.0

    def validate(self):
        if self.n_objects < 0:
            raise InvalidParameterError("n_objects must be >= 0")
        if self.n_views < 2:
            raise InvalidParameterError("n_views must be >= 2")
        if self.width < 16 or self.height < 16:
            raise InvalidParameterError("image size must be at least 16x16")
        names = self.object_labels()
        if len(names) < self.n_objects:
            raise InvalidParameterError(
                f"need at least {self.n_objects} labels, have {len(names)}"
            )
        if self.gaussians_per_object < 1 or self.gaussians_per_glare < 1:
            raise InvalidParameterError("cluster sizes must be >= 1")
        if self.init_distractor_ratio < 0:
            raise InvalidParameterError("init_distractor_ratio must be >= 0")
        if self.feature_noise < 0:
            raise InvalidParameterError("feature_noise must be >= 0")
        if not (0.0 < self.camera_arc_degrees <= 360.0):
            raise InvalidParameterError("camera_arc_degrees must lie in (0, 360]")

    def object_labels(self) -> list:
        if self.labels is not None:
            return list(self.labels)
        return [name for name, _ in PALETTE]


def _padded_labels(spec: SyntheticSpec) -> list:
    """Query labels: the object labels, padded to >= 2 entries so the
    relevancy softmax is never degenerate."""
    names = spec.object_labels()[: spec.n_objects]
    for pad in PAD_LABELS:
        if len(names) >= 2:
            break
        if pad not in names:
            names.append(pad)
    return names


def look_at_camera(eye, target, width, height, fx, fy) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise InvalidParameterError("look_at_camera: eye coincides with target")
    forward /= norm
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Camera(
        fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
        rotation=rotmat_to_quat(rot), translation=-rot @ eye,
    )


def _ring_cameras(spec: SyntheticSpec) -> list:
    fx = fy = 0.9 * spec.width
    arc = math.radians(spec.camera_arc_degrees)
    full = spec.camera_arc_degrees >= 360.0
    cams = []
    for v in range(spec.n_views):
        # A full ring spaces views open-ended (no duplicate at 0/2pi); a
        # partial arc is a capture sweep centered on angle 0 with both
        # endpoints included, the way a handheld pass covers a scene.
        if full:
            angle = 2.0 * np.pi * v / spec.n_views
        else:
            angle = -arc / 2.0 + arc * v / max(1, spec.n_views - 1)
        eye = (
            CAMERA_RING_RADIUS * np.cos(angle),
            CAMERA_RING_RADIUS * np.sin(angle),
            CAMERA_HEIGHT,
        )
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), spec.width, spec.height, fx, fy))
    return cams


def _random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@dataclasses.dataclass
class SceneBuild:
    """In-memory result of the generator, before/after writing to disk."""

    spec: SyntheticSpec
    labels: list
    queries: QuerySet
    gt_cloud: GaussianCloud
    init_cloud: GaussianCloud
    owners: np.ndarray    # per GT Gaussian: owning label index
    tangible: np.ndarray  # per GT Gaussian: False for glare
    cameras: list
    images: list
    feature_maps: list
    label_maps: list
    boxes: list           # per frame: {label name: [x0, y0, x1, y1]}


def _build_gt_cloud(spec: SyntheticSpec, labels, rng):
    d_f = len(labels)
    color_of = dict(PALETTE)
    positions, log_scales, rotations = [], [], []
    opacity_logits, colors, features, indicator_logits = [], [], [], []
    owners, tangible = [], []
    object_centers = []

    for k in range(spec.n_objects):
        angle = 2.0 * np.pi * k / max(spec.n_objects, 1) + rng.uniform(-0.2, 0.2)
        center = np.array(
            [
                OBJECT_RING_RADIUS * np.cos(angle),
                OBJECT_RING_RADIUS * np.sin(angle),
                rng.uniform(-0.15, 0.15),
            ]
        )
        object_centers.append(center)
        base = np.array(color_of.get(labels[k], rng.uniform(0.1, 0.9, size=3)))
        n = spec.gaussians_per_object
        positions.append(center + rng.normal(0.0, 0.22, size=(n, 3)))
        log_scales.append(np.log(0.09) + rng.uniform(-0.25, 0.25, size=(n, 3)))
        rotations.append(_random_unit_quats(rng, n))
        opacity_logits.append(logit(0.85) + rng.uniform(-0.3, 0.3, size=n))
        colors.append(np.clip(base + rng.uniform(-0.06, 0.06, size=(n, 3)), 0.05, 0.95))
        emb = np.zeros((n, d_f))
        emb[:, k] = 1.0
        features.append(emb)
        indicator_logits.append(np.full(n, logit(0.97)))
        owners.extend([k] * n)
        tangible.extend([True] * n)

    if spec.glare:
        for k, center in enumerate(object_centers):
            # The pile floats in front of its host, displaced toward the
            # arc center (the +x cameras). Parallax then slides it across
            # the host silhouette as the camera moves: the same Gaussians
            # sit over host pixels in some views and over background in
            # others, so no per-Gaussian feature assignment can satisfy a
            # chain that reuses color opacity; a learned indicator simply
            # opts the whole pile out of the language chain.
            g_center = center + GLARE_TOWARD_OFFSET * np.array([1.0, 0.0, 0.0])
            g_center[2] += GLARE_HEIGHT_OFFSET
            n = spec.gaussians_per_glare
            # Broad, deep pile: a dozen near-cap Gaussians push cumulative
            # occlusion toward ~0.9 at the core while every individual
            # opacity stays below the 0.3 intangibility ceiling.
            positions.append(g_center + rng.normal(0.0, 0.13, size=(n, 3)))
            log_scales.append(np.log(0.13) + rng.uniform(-0.15, 0.15, size=(n, 3)))
            rotations.append(_random_unit_quats(rng, n))
            opacity_logits.append(logit(0.28) + rng.uniform(-0.03, 0.03, size=n))
            colors.append(np.clip(np.array(GLARE_COLOR) + rng.uniform(-0.03, 0.03, size=(n, 3)), 0.0, 1.0))
            emb = np.zeros((n, d_f))
            emb[:, k] = 1.0
            features.append(emb)
            indicator_logits.append(np.full(n, logit(0.03)))
            owners.extend([k] * n)
            tangible.extend([False] * n)

    if positions:
        cloud = GaussianCloud(
            positions=np.concatenate(positions),
            log_scales=np.concatenate(log_scales),
            rotations=np.concatenate(rotations),
            opacity_logits=np.concatenate(opacity_logits),
            colors=np.concatenate(colors),
            features=np.concatenate(features),
            indicator_logits=np.concatenate(indicator_logits),
        )
    else:
        cloud = GaussianCloud.empty(feature_dim=d_f)
    return cloud, np.asarray(owners, dtype=np.int64), np.asarray(tangible, dtype=bool), object_centers


def _build_init_cloud(spec: SyntheticSpec, gt: GaussianCloud, rng) -> GaussianCloud:
    """Perturbed GT positions plus uniform distractors; opacities, indicators,
    colors, and features all start uninformed."""
    d_f = gt.feature_dim
    n_gt = gt.n
    n_extra = int(round(spec.init_distractor_ratio * n_gt))
    n = n_gt + n_extra
    if n == 0:
        return GaussianCloud.empty(feature_dim=d_f)
    positions = np.concatenate(
        [
            gt.positions + rng.normal(0.0, spec.init_position_jitter, size=(n_gt, 3)),
            np.column_stack(
                [
                    rng.uniform(-1.6, 1.6, size=n_extra),
                    rng.uniform(-1.6, 1.6, size=n_extra),
                    rng.uniform(-0.4, 0.6, size=n_extra),
                ]
            ),
        ]
    )
    log_scales = np.concatenate(
        [
            gt.log_scales + rng.uniform(-0.15, 0.15, size=(n_gt, 3)),
            np.log(0.1) + rng.uniform(-0.2, 0.2, size=(n_extra, 3)),
        ]
    )
    return GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=_random_unit_quats(rng, n),
        opacity_logits=np.full(n, logit(0.1)),
        colors=rng.uniform(0.2, 0.8, size=(n, 3)),
        features=rng.normal(0.0, 0.05, size=(n, d_f)),
        # Neutral prior: the indicator sigmoid starts at 0.5, where its
        # gradient is largest, so the language chain is half-open from the
        # first step and semantics need not wait for indicators to warm up.
        indicator_logits=np.zeros(n),
    )


def _label_bbox(label_map: np.ndarray, label: int):
    rows, cols = np.nonzero(label_map == label)
    if rows.size == 0:
        return None
    return [int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())]


def _assert_glare_construction(build: SceneBuild):
    """Generator self-check: some glare cluster, in some view, floats over
    pixels the label map assigns to its host object."""
    spec = build.spec
    if not spec.glare or spec.n_objects == 0:
        return
    opac = build.gt_cloud.opacities()
    glare_rows = np.nonzero(~build.tangible)[0]
    if glare_rows.size == 0 or not np.all(opac[glare_rows] < 0.3):
        raise InvalidStateError("glare construction: expected low-opacity glare Gaussians")

    glare_centers = {}
    for k in range(spec.n_objects):
        rows = glare_rows[build.owners[glare_rows] == k]
        if rows.size:
            glare_centers[k] = build.gt_cloud.positions[rows].mean(axis=0)
    for cam, label_map in zip(build.cameras, build.label_maps):
        rot = cam.rotation_matrix()
        for k, center in glare_centers.items():
            p = rot @ center + cam.translation
            if p[2] <= Z_NEAR:
                continue
            col = int(round(cam.fx * p[0] / p[2] + cam.cx))
            row = int(round(cam.fy * p[1] / p[2] + cam.cy))
            if 0 <= row < cam.height and 0 <= col < cam.width and label_map[row, col] == k:
                return
    raise InvalidStateError("glare construction: no view shows glare over its host object")


def build_scene(spec: SyntheticSpec) -> SceneBuild:
    """Construct the scene in memory (no disk writes)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = _padded_labels(spec)
    d_f = len(labels)
    gt_cloud, owners, tangible, _ = _build_gt_cloud(spec, labels, rng)
    init_cloud = _build_init_cloud(spec, gt_cloud, rng)
    cameras = _ring_cameras(spec)
    queries = QuerySet(labels=labels, embeddings=np.eye(d_f))

    # Identity fusion: freshly initialized attention has a zero output map.
    fusion = make_fusion_model("self", COLOR_DIM, d_f, ATTN_DIM_DEFAULT, rng)
    quality = RasterConfig.quality()
    mode = IndicatorMode("dual")

    images, feature_maps, label_maps, boxes = [], [], [], []
    for cam in cameras:
        ref = rasterize_reference(gt_cloud, cam, fusion, mode, quality)
        images.append(np.clip(ref.color, 0.0, 1.0))
        # Label maps come from the same render path evaluation uses, so a
        # GT-checkpoint eval reproduces them bit-for-bit.
        out = rasterize(gt_cloud, cam, fusion, mode, quality, channels="semantics")
        label_map = decode_labels(out.semantics, queries, BACKGROUND_NORM_FLOOR)
        label_maps.append(label_map)
        hard = np.zeros((spec.height, spec.width, d_f))
        for k in range(d_f):
            hard[label_map == k, k] = 1.0
        if spec.feature_noise > 0.0:
            hard = hard + rng.normal(0.0, spec.feature_noise, size=hard.shape)
        feature_maps.append(hard)
        frame_boxes = {}
        for k, name in enumerate(labels):
            bbox = _label_bbox(label_map, k)
            if bbox is not None:
                frame_boxes[name] = bbox
        boxes.append(frame_boxes)

    build = SceneBuild(
        spec=spec,
        labels=labels,
        queries=queries,
        gt_cloud=gt_cloud,
        init_cloud=init_cloud,
        owners=owners,
        tangible=tangible,
        cameras=cameras,
        images=images,
        feature_maps=feature_maps,
        label_maps=label_maps,
        boxes=boxes,
    )
    _assert_glare_construction(build)
    return build


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Build the scene and write it to out_dir; returns the manifest path."""
    build = build_scene(spec)
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)

    frames = []
    for v, cam in enumerate(build.cameras):
        image_rel = f"frames/frame_{v:03d}.png"
        feat_rel = f"frames/frame_{v:03d}_features.mgst"
        label_rel = f"frames/frame_{v:03d}_labels.mgst"
        write_image(root / image_rel, build.images[v])
        write_tensor(root / feat_rel, build.feature_maps[v].astype(np.float64))
        write_tensor(root / label_rel, build.label_maps[v].astype(np.float64))
        frames.append(
            {
                "image_path": image_rel,
                "feature_path": feat_rel,
                "label_map_path": label_rel,
                "boxes": build.boxes[v],
                "camera": camera_to_dict(cam),
            }
        )

    write_tensor(root / "queries.mgst", build.queries.embeddings.astype(np.float64))

    gen_rng = np.random.default_rng(build.spec.seed)
    identity_fusion = make_fusion_model(
        "self", COLOR_DIM, len(build.labels), ATTN_DIM_DEFAULT, gen_rng
    )
    save_checkpoint(
        CheckpointState(
            cloud=build.gt_cloud,
            fusion=identity_fusion,
            indicator=IndicatorMode("dual"),
            iteration=0,
            config_hash="ground-truth",
        ),
        root / "gt",
    )
    save_checkpoint(
        CheckpointState(
            cloud=build.init_cloud,
            fusion=make_fusion_model("none", COLOR_DIM, len(build.labels), ATTN_DIM_DEFAULT, gen_rng),
            indicator=IndicatorMode("dual"),
            iteration=0,
            config_hash="init",
        ),
        root / "init",
    )

    manifest = {
        "format_version": 1,
        "d_f": len(build.labels),
        "labels": build.labels,
        "query_embeddings_path": "queries.mgst",
        "init_checkpoint": "init",
        "gt_checkpoint": "gt",
        "generator": {
            "n_objects": spec.n_objects,
            "n_views": spec.n_views,
            "width": spec.width,
            "height": spec.height,
            "seed": spec.seed,
            "glare": spec.glare,
        },
        "frames": frames,
    }
    manifest_path = root / "manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path
