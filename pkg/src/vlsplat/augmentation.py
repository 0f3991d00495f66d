"""Camera-view blending augmentation.

A synthetic supervision view is built between two training views: the
world-to-camera rotations are Slerp-interpolated, the camera centers are
Lerp-interpolated in world coordinates, the ground-truth feature maps are
blended with the same ratio k, and the blend loss is weighted by the SSIM of
the two source images. k is drawn from Beta(0.2, 0.2) by default, which
concentrates mass near the endpoints; ablation samplers are provided.

Convention: k = 1 recovers the FIRST view everywhere (rotation, center, and
GT blend k*H1 + (1-k)*H2 all agree on which endpoint k=1 selects).
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidParameterError
from .scene import Camera, TrainSample, normalize_quaternion, quat_to_rotmat

LERP_COS_THRESHOLD = 0.995
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
RATIO_MODES = ("beta", "uniform", "gauss", "fixed")
BLEND_VARIANTS = ("full", "no-rot", "no-trans", "no-ssim", "off")


def slerp(q1, q2, k: float) -> np.ndarray:
    """Spherical interpolation between quaternions; k=1 -> q1, k=0 -> q2.

    Nearly-parallel pairs (|cos theta| > 0.995) fall back to normalized Lerp.
    The sign factor on the q1 term keeps antipodal pairs on the short arc.
    Output is unit-norm; overall quaternion sign is not canonicalized.
    """
    if not (0.0 <= k <= 1.0):
        raise InvalidParameterError(f"slerp: k must lie in [0, 1], got {k}")
    q1h = normalize_quaternion(np.asarray(q1, dtype=np.float64))
    q2h = normalize_quaternion(np.asarray(q2, dtype=np.float64))
    cos_theta = float(np.clip(np.dot(q1h, q2h), -1.0, 1.0))
    sign = 1.0 if cos_theta >= 0.0 else -1.0
    if abs(cos_theta) > LERP_COS_THRESHOLD:
        return normalize_quaternion(k * sign * q1h + (1.0 - k) * q2h)
    theta = math.acos(cos_theta)
    sin_theta = math.sin(theta)
    blend = sign * q1h * (math.sin(k * theta) / sin_theta) + q2h * (math.sin((1.0 - k) * theta) / sin_theta)
    return normalize_quaternion(blend)


def lerp_translation(t1, t2, k: float) -> np.ndarray:
    """Componentwise affine combination k*t1 + (1-k)*t2."""
    if not (0.0 <= k <= 1.0):
        raise InvalidParameterError(f"lerp_translation: k must lie in [0, 1], got {k}")
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    return k * t1 + (1.0 - k) * t2


def sample_ratio(rng, mode: str = "beta", value: float = 0.5) -> float:
    """Interpolation-ratio sampler. beta: Beta(0.2, 0.2); uniform: U[0,1);
    gauss: standard normal clipped to [0,1]; fixed: the given value."""
    if mode == "beta":
        return float(rng.beta(0.2, 0.2))
    if mode == "uniform":
        return float(rng.random())
    if mode == "gauss":
        return float(np.clip(rng.standard_normal(), 0.0, 1.0))
    if mode == "fixed":
        if not (0.0 <= value <= 1.0):
            raise InvalidParameterError("fixed ratio must lie in [0, 1]")
        return float(value)
    raise InvalidParameterError(f"unknown ratio mode {mode!r}")


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(i1: np.ndarray, i2: np.ndarray) -> float:
    """Structural similarity on [0,1]-range images, 11x11 Gaussian window
    (sigma 1.5), averaged over channels and pixels, clamped to [0,1] for use
    as a loss weight. Accepts (H, W) or (H, W, C); needs H, W >= 11."""
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise InvalidParameterError(f"ssim: shape mismatch {i1.shape} vs {i2.shape}")
    if i1.ndim == 2:
        i1 = i1[:, :, None]
        i2 = i2[:, :, None]
    if i1.ndim != 3:
        raise InvalidParameterError("ssim: expected (H, W) or (H, W, C) images")
    if i1.shape[0] < SSIM_WINDOW or i1.shape[1] < SSIM_WINDOW:
        raise InvalidParameterError(f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    window = _ssim_window()

    means = []
    for c in range(i1.shape[2]):
        a = i1[:, :, c]
        b = i2[:, :, c]
        mu_a = convolve2d(a, window, mode="valid")
        mu_b = convolve2d(b, window, mode="valid")
        var_a = convolve2d(a * a, window, mode="valid") - mu_a * mu_a
        var_b = convolve2d(b * b, window, mode="valid") - mu_b * mu_b
        cov = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        means.append(np.mean(num / den))
    return float(np.clip(np.mean(means), 0.0, 1.0))


@dataclasses.dataclass(frozen=True)
class BlendConfig:
    """Which pieces of the augmentation are active (ablation axes)."""

    enabled: bool = True
    blend_rotation: bool = True
    blend_translation: bool = True
    use_ssim_weight: bool = True
    ratio_mode: str = "beta"
    ratio_value: float = 0.5

    def __post_init__(self):
        if self.ratio_mode not in RATIO_MODES:
            raise InvalidParameterError(f"unknown ratio mode {self.ratio_mode!r}")

    @staticmethod
    def parse(blend: str = "full", ratio: str = "beta") -> "BlendConfig":
        """blend: full|no-rot|no-trans|no-ssim|off; ratio: beta|uniform|gauss|fixed:K."""
        if blend not in BLEND_VARIANTS:
            raise InvalidParameterError(f"unknown blend variant {blend!r}")
        mode, value = ratio, 0.5
        if ratio.startswith("fixed:"):
            mode = "fixed"
            try:
                value = float(ratio.split(":", 1)[1])
            except ValueError as exc:
                raise InvalidParameterError(f"bad fixed ratio in {ratio!r}") from exc
        return BlendConfig(
            enabled=blend != "off",
            blend_rotation=blend != "no-rot",
            blend_translation=blend != "no-trans",
            use_ssim_weight=blend != "no-ssim",
            ratio_mode=mode,
            ratio_value=value,
        )

    def describe(self) -> tuple:
        if not self.enabled:
            blend = "off"
        elif not self.blend_rotation:
            blend = "no-rot"
        elif not self.blend_translation:
            blend = "no-trans"
        elif not self.use_ssim_weight:
            blend = "no-ssim"
        else:
            blend = "full"
        ratio = f"fixed:{self.ratio_value:g}" if self.ratio_mode == "fixed" else self.ratio_mode
        return blend, ratio


@dataclasses.dataclass
class BlendSample:
    """A synthesized supervision view between two training samples."""

    pose_b: Camera
    gt_b: np.ndarray  # blended GT feature map (H, W, d_f)
    weight: float     # SSIM(I1, I2) in [0, 1]
    k: float


def make_blend_sample(
    s1: TrainSample,
    s2: TrainSample,
    rng,
    config: BlendConfig = BlendConfig(),
    ssim_weight: float | None = None,
) -> BlendSample:
    """Blend two training samples with one shared ratio k.

    Rotation: Slerp of the world-to-camera quaternions. Center: Lerp of the
    camera centers in world coordinates, converted back to a translation
    under the blended rotation. Intrinsics come from s1. The pose is a
    constant for optimization purposes. ssim_weight substitutes the SSIM
    evaluation when the caller has it cached (it depends only on the pair).
    """
    cam1, cam2 = s1.camera, s2.camera
    if (cam1.width, cam1.height) != (cam2.width, cam2.height):
        raise InvalidParameterError("make_blend_sample: image dimensions differ")
    if s1.gt_features.shape != s2.gt_features.shape:
        raise InvalidParameterError("make_blend_sample: feature map shapes differ")
    if cam1.same_view(cam2):
        raise InvalidParameterError("make_blend_sample: views must be distinct")

    k = sample_ratio(rng, config.ratio_mode, config.ratio_value)

    if config.blend_rotation:
        q_b = slerp(cam1.rotation, cam2.rotation, k)
    else:
        q_b = cam1.rotation.copy()
    if config.blend_translation:
        center_b = lerp_translation(cam1.center(), cam2.center(), k)
    else:
        center_b = cam1.center()
    rot_b = quat_to_rotmat(q_b)
    t_b = -rot_b @ center_b
    pose_b = Camera(
        fx=cam1.fx, fy=cam1.fy, cx=cam1.cx, cy=cam1.cy,
        width=cam1.width, height=cam1.height,
        rotation=q_b, translation=t_b,
    )

    gt_b = k * s1.gt_features + (1.0 - k) * s2.gt_features
    if not config.use_ssim_weight:
        weight = 1.0
    elif ssim_weight is not None:
        weight = float(ssim_weight)
    else:
        weight = ssim(s1.image, s2.image)
    return BlendSample(pose_b=pose_b, gt_b=gt_b, weight=weight, k=k)
