"""Multi-modal Gaussian scene representation shared by every other module.

A scene is a cloud of anisotropic 3D Gaussians. Each Gaussian carries two
payloads that are rendered by separate compositing chains: an RGB color
blended with the Gaussian's opacity, and a language feature vector blended
with a separate learnable indicator. Opacity and indicator are stored as
logits so their activated values stay inside (0, 1) without constrained
optimization; scales are stored as logs so covariances stay positive.

Images are plain ``(H, W, 3)`` float arrays in [0, 1] and feature maps are
``(H, W, feature_dim)`` float arrays; no wrapper classes.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidParameterError

# Activated opacities/indicators are clipped to this open interval so the
# compositing chains can never produce an alpha of exactly 1 (the backward
# pass multiplies by 1 - alpha).
UNIT_INTERVAL_EPS = 1e-12


def activate(logit_value):
    """Sigmoid activation mapping logits to (0, 1). Accepts scalars or arrays.

    The output is clipped to [1e-12, 1 - 1e-12]: a plain float64 sigmoid
    returns exactly 0.0 or 1.0 for |logit| >= ~37, which would violate the
    strict (0, 1) contract downstream compositing relies on.
    """
    arr = np.asarray(logit_value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("activate: logit must be finite")
    # Stable piecewise sigmoid; np.exp never sees a positive argument.
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    out = np.clip(out, UNIT_INTERVAL_EPS, 1.0 - UNIT_INTERVAL_EPS)
    if arr.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of :func:`activate` on (0, 1)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise InvalidParameterError("logit: argument must lie strictly in (0, 1)")
    out = np.log(arr) - np.log1p(-arr)
    if arr.ndim == 0:
        return float(out)
    return out


def normalize_quaternion(q):
    """Return q / ||q||, raising on zero or non-finite input."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4 or not np.all(np.isfinite(q)):
        raise InvalidParameterError("quaternion must be 4 finite components")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero quaternion cannot be normalized")
    return q / norm


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions.

    Accepts shape (4,) or (N, 4); quaternions are normalized on read.
    Returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qn = normalize_quaternion(np.atleast_2d(q))
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = np.empty((qn.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - w * z)
    rot[:, 0, 2] = 2.0 * (x * z + w * y)
    rot[:, 1, 0] = 2.0 * (x * y + w * z)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - w * x)
    rot[:, 2, 0] = 2.0 * (x * z - w * y)
    rot[:, 2, 1] = 2.0 * (y * z + w * x)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot[0] if single else rot


def quat_rotation_jacobian(q_unit):
    """d(rotation matrix)/d(unit quaternion) for unit quaternions.

    Input shape (N, 4) with unit rows; output shape (N, 4, 3, 3) where
    entry [n, a, i, j] is dR[n, i, j] / dq_unit[n, a]. The projection onto
    the unit sphere (for raw, unnormalized parameters) is applied separately
    by :func:`quat_backward`.
    """
    q = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    jac = np.empty((q.shape[0], 4, 3, 3), dtype=np.float64)
    jac[:, 0] = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(-1, 3, 3)
    jac[:, 1] = 2.0 * np.stack(
        [zero, y, z, y, -2.0 * x, -w, z, w, -2.0 * x], axis=-1
    ).reshape(-1, 3, 3)
    jac[:, 2] = 2.0 * np.stack(
        [-2.0 * y, x, w, x, zero, z, -w, z, -2.0 * y], axis=-1
    ).reshape(-1, 3, 3)
    jac[:, 3] = 2.0 * np.stack(
        [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, zero], axis=-1
    ).reshape(-1, 3, 3)
    return jac


def quat_backward(q_raw, d_rot):
    """Gradient of sum(d_rot * R(normalize(q_raw))) w.r.t. the raw quaternion.

    q_raw: (N, 4) unnormalized parameters; d_rot: (N, 3, 3).
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norms = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_unit = q_raw / norms
    jac = quat_rotation_jacobian(q_unit)
    d_unit = np.einsum("naij,nij->na", jac, d_rot)
    # Chain through normalization: dq = (I - q q^T)/||q_raw|| . d_unit
    proj = d_unit - q_unit * np.sum(q_unit * d_unit, axis=1, keepdims=True)
    return proj / norms


def rotmat_to_quat(rot):
    """Unit quaternion (w, x, y, z) for a single 3x3 rotation matrix.

    Shepperd's method; the result has w >= 0 for a canonical sign.
    """
    m = np.asarray(rot, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def build_covariance(log_scale, rotation):
    """3x3 covariance R diag(exp(2 s)) R^T from log-scales and a quaternion.

    Eigenvalues are exactly exp(2 * log_scale) up to rotation round-off; the
    quaternion is normalized on read.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if log_scale.shape != (3,) or not np.all(np.isfinite(log_scale)):
        raise InvalidParameterError("log_scale must be 3 finite components")
    rot = quat_to_rotmat(rotation)
    var = np.exp(2.0 * log_scale)
    return (rot * var[None, :]) @ rot.T


@dataclasses.dataclass
class GaussianCloud:
    """Learnable per-Gaussian parameters for one scene.

    positions:        (N, 3) world-space means
    log_scales:       (N, 3) log standard deviations per local axis
    rotations:        (N, 4) quaternions (w, x, y, z), normalized on read
    opacity_logits:   (N,)   pre-sigmoid color-chain opacity
    colors:           (N, 3) RGB in [0, 1]
    features:         (N, feature_dim) unconstrained language features
    indicator_logits: (N,)   pre-sigmoid language-chain indicator
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    indicator_logits: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.indicator_logits = np.ascontiguousarray(self.indicator_logits, dtype=np.float64).reshape(-1)
        self.validate()

    def validate(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (self.positions, (n, 3)),
            "log_scales": (self.log_scales, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "colors": (self.colors, (n, 3)),
            "indicator_logits": (self.indicator_logits, (n,)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise InvalidParameterError(f"GaussianCloud.{name}: expected shape {want}, got {arr.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InvalidParameterError("GaussianCloud.features: expected shape (N, feature_dim)")
        for name in shapes:
            if not np.all(np.isfinite(shapes[name][0])):
                raise InvalidParameterError(f"GaussianCloud.{name}: non-finite entries")
        if not np.all(np.isfinite(self.features)):
            raise InvalidParameterError("GaussianCloud.features: non-finite entries")
        if n > 0 and np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise InvalidParameterError("GaussianCloud.rotations: zero quaternion")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def opacities(self) -> np.ndarray:
        return np.asarray(activate(self.opacity_logits))

    def indicators(self) -> np.ndarray:
        return np.asarray(activate(self.indicator_logits))

    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternion(self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            features=self.features.copy(),
            indicator_logits=self.indicator_logits.copy(),
        )

    @staticmethod
    def empty(feature_dim: int = 3) -> "GaussianCloud":
        return GaussianCloud(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)) + np.array([1.0, 0.0, 0.0, 0.0]),
            opacity_logits=np.zeros((0,)),
            colors=np.zeros((0, 3)),
            features=np.zeros((0, feature_dim)),
            indicator_logits=np.zeros((0,)),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: intrinsics in pixels plus world-to-camera pose.

    The pose convention is x_cam = R(rotation) @ x_world + translation; the
    camera center in world coordinates is therefore -R^T @ translation.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("Camera: focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise InvalidParameterError("Camera: image dimensions must be >= 1")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(rot)):
            raise InvalidParameterError("Camera: non-finite rotation")
        norm = np.linalg.norm(rot)
        if abs(norm - 1.0) > 1e-6:
            raise InvalidParameterError("Camera: rotation quaternion must be unit norm within 1e-6")
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(trans)):
            raise InvalidParameterError("Camera: non-finite translation")
        rot = rot / norm
        rot.setflags(write=False)
        trans = trans.copy()
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix().T @ self.translation

    def same_view(self, other: "Camera") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
        )


@dataclasses.dataclass
class TrainSample:
    """One training frame: RGB image, pose, ground-truth feature map."""

    image: np.ndarray
    camera: Camera
    gt_features: np.ndarray

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float64)
        self.gt_features = np.ascontiguousarray(self.gt_features, dtype=np.float64)
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise InvalidParameterError(
                f"TrainSample.image: expected {(h, w, 3)}, got {self.image.shape}"
            )
        if self.gt_features.ndim != 3 or self.gt_features.shape[:2] != (h, w):
            raise InvalidParameterError("TrainSample.gt_features: dimensions mismatch camera")
        if not np.all(np.isfinite(self.image)) or not np.all(np.isfinite(self.gt_features)):
            raise InvalidParameterError("TrainSample: non-finite data")


@dataclasses.dataclass
class Dataset:
    """Ordered list of training samples with a consistent feature width."""

    samples: list

    def __post_init__(self):
        if len(self.samples) == 0:
            raise InvalidParameterError("Dataset: at least one sample required")
        width = self.samples[0].gt_features.shape[2]
        for s in self.samples:
            if s.gt_features.shape[2] != width:
                raise InvalidParameterError("Dataset: inconsistent feature dims")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> TrainSample:
        return self.samples[i]

    @property
    def feature_dim(self) -> int:
        return self.samples[0].gt_features.shape[2]
