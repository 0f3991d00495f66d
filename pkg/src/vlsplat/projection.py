"""EWA projection of 3D Gaussians to screen space, with analytic gradients.

A 3D Gaussian (mean mu, covariance Sigma) maps to an image-plane Gaussian
via the local affine approximation of the perspective camera:

    p        = R_cam @ mu + t                     (camera space)
    mean2d   = (fx px/pz + cx, fy py/pz + cy)
    J        = [[fx/pz, 0, -fx px/pz^2],
                [0, fy/pz, -fy py/pz^2]]
    cov2d    = J R_cam Sigma R_cam^T J^T + 0.3 I

The 0.3 px^2 diagonal dilation keeps cov2d invertible for sub-pixel
Gaussians. Contribution footprints are the axis-aligned bounding boxes of
the 3-sigma circle around mean2d; the same footprint rule is shared by the
fast rasterizer and the reference oracle so they agree to accumulation
precision. Gaussians behind the near plane or with an empty footprint are
culled; survivors are sorted by depth with index tie-breaking.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidParameterError, InvalidStateError
from .scene import Camera, GaussianCloud, quat_backward, quat_to_rotmat

Z_NEAR = 0.01
COV2D_DILATION = 0.3
FOOTPRINT_SIGMA = 3.0


@dataclasses.dataclass(frozen=True)
class ProjectedGaussian:
    """Screen-space view of one Gaussian; ``index`` refers to cloud storage."""

    index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float


@dataclasses.dataclass
class ProjectionBatch:
    """Array-of-struct view over all surviving Gaussians, depth-ascending.

    bboxes rows are (row0, row1, col0, col1), inclusive pixel ranges clipped
    to the image; every retained Gaussian has a non-empty box.
    """

    indices: np.ndarray
    means2d: np.ndarray
    covs2d: np.ndarray
    inv_covs2d: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    bboxes: np.ndarray
    width: int
    height: int

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclasses.dataclass
class ProjectionCache:
    """Intermediates retained for the projection backward pass."""

    cloud_n: int
    cam_rot: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    affine: np.ndarray
    cov3d: np.ndarray
    rotmats: np.ndarray
    variances: np.ndarray
    quats_raw: np.ndarray
    fx: float
    fy: float


def _pixel_bbox(mean2d, radius, width, height):
    """Inclusive integer pixel box covered by the footprint, or None."""
    col0 = max(0, int(math.ceil(mean2d[0] - radius)))
    col1 = min(width - 1, int(math.floor(mean2d[0] + radius)))
    row0 = max(0, int(math.ceil(mean2d[1] - radius)))
    row1 = min(height - 1, int(math.floor(mean2d[1] + radius)))
    if col0 > col1 or row0 > row1:
        return None
    return row0, row1, col0, col1


def project_batch(cloud: GaussianCloud, cam: Camera, footprint_sigma: float = FOOTPRINT_SIGMA):
    """Project a cloud, cull, and depth-sort. Returns (batch, cache).

    ``footprint_sigma`` scales the bounding radius; ``math.inf`` makes every
    in-frustum Gaussian cover the full image (used by gradient checks to
    remove the piecewise-constant footprint edge).
    """
    n = cloud.n
    cam_rot = cam.rotation_matrix()
    width, height = cam.width, cam.height
    if n == 0:
        empty = ProjectionBatch(
            indices=np.zeros(0, dtype=np.int64),
            means2d=np.zeros((0, 2)),
            covs2d=np.zeros((0, 2, 2)),
            inv_covs2d=np.zeros((0, 2, 2)),
            depths=np.zeros(0),
            radii=np.zeros(0),
            bboxes=np.zeros((0, 4), dtype=np.int64),
            width=width,
            height=height,
        )
        cache = ProjectionCache(
            cloud_n=0,
            cam_rot=cam_rot,
            p_cam=np.zeros((0, 3)),
            jac=np.zeros((0, 2, 3)),
            affine=np.zeros((0, 2, 3)),
            cov3d=np.zeros((0, 3, 3)),
            rotmats=np.zeros((0, 3, 3)),
            variances=np.zeros((0, 3)),
            quats_raw=np.zeros((0, 4)),
            fx=cam.fx,
            fy=cam.fy,
        )
        return empty, cache

    p_cam_all = cloud.positions @ cam_rot.T + cam.translation
    in_front = p_cam_all[:, 2] > Z_NEAR
    idx_front = np.nonzero(in_front)[0]

    p_cam = p_cam_all[idx_front]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    means2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    jac = np.zeros((idx_front.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)

    rotmats = quat_to_rotmat(cloud.rotations[idx_front])
    variances = np.exp(2.0 * cloud.log_scales[idx_front])
    cov3d = np.einsum("nik,nk,njk->nij", rotmats, variances, rotmats)
    affine = jac @ cam_rot
    covs2d = np.einsum("nik,nkl,njl->nij", affine, cov3d, affine)
    covs2d[:, 0, 0] += COV2D_DILATION
    covs2d[:, 1, 1] += COV2D_DILATION

    # Largest eigenvalue of the 2x2 covariance gives the bounding radius.
    a, b, c = covs2d[:, 0, 0], covs2d[:, 0, 1], covs2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    if math.isinf(footprint_sigma):
        radii = np.full(idx_front.size, float(max(width, height)) * 2.0 + 1.0)
    else:
        radii = footprint_sigma * np.sqrt(lam_max)

    bboxes = np.empty((idx_front.size, 4), dtype=np.int64)
    keep = np.zeros(idx_front.size, dtype=bool)
    for i in range(idx_front.size):
        box = _pixel_bbox(means2d[i], radii[i], width, height)
        if box is not None:
            keep[i] = True
            bboxes[i] = box

    order = np.nonzero(keep)[0]
    order = order[np.lexsort((idx_front[order], z[order]))]

    det = a[order] * c[order] - b[order] * b[order]
    inv = np.empty((order.size, 2, 2))
    inv[:, 0, 0] = c[order] / det
    inv[:, 1, 1] = a[order] / det
    inv[:, 0, 1] = -b[order] / det
    inv[:, 1, 0] = -b[order] / det

    batch = ProjectionBatch(
        indices=idx_front[order],
        means2d=means2d[order],
        covs2d=covs2d[order],
        inv_covs2d=inv,
        depths=z[order],
        radii=radii[order],
        bboxes=bboxes[order],
        width=width,
        height=height,
    )
    cache = ProjectionCache(
        cloud_n=n,
        cam_rot=cam_rot,
        p_cam=p_cam[order],
        jac=jac[order],
        affine=affine[order],
        cov3d=cov3d[order],
        rotmats=rotmats[order],
        variances=variances[order],
        quats_raw=cloud.rotations[idx_front[order]],
        fx=cam.fx,
        fy=cam.fy,
    )
    return batch, cache


def project(cloud: GaussianCloud, cam: Camera):
    """Depth-sorted list of :class:`ProjectedGaussian` for the visible cloud."""
    batch, _ = project_batch(cloud, cam)
    return [
        ProjectedGaussian(
            index=int(batch.indices[i]),
            mean2d=batch.means2d[i].copy(),
            cov2d=batch.covs2d[i].copy(),
            depth=float(batch.depths[i]),
            radius=float(batch.radii[i]),
        )
        for i in range(len(batch))
    ]


def gaussian_weight(v, pg: ProjectedGaussian) -> float:
    """exp(-0.5 d^T cov2d^{-1} d) with d = v - mean2d; equals 1 at the mean."""
    d = np.asarray(v, dtype=np.float64) - pg.mean2d
    cov = pg.cov2d
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0.0 or not np.isfinite(det):
        raise InvalidStateError("gaussian_weight: singular 2x2 covariance")
    quad = (cov[1, 1] * d[0] * d[0] - 2.0 * cov[0, 1] * d[0] * d[1] + cov[0, 0] * d[1] * d[1]) / det
    return float(np.exp(-0.5 * quad))


def project_backward(cache: ProjectionCache, d_means2d, d_covs2d):
    """Map screen-space gradients back to per-row 3D parameter gradients.

    d_means2d: (M, 2) and d_covs2d: (M, 2, 2) gradients for the batch rows
    (depth order). Returns (d_position, d_log_scale, d_rotation) row
    gradients of shapes (M, 3), (M, 3), (M, 4); callers scatter them into
    cloud-sized arrays via the batch's ``indices``. Depth carries no
    gradient (sorting is piecewise constant).
    """
    m = cache.p_cam.shape[0]
    d_means2d = np.asarray(d_means2d, dtype=np.float64)
    d_covs2d = np.asarray(d_covs2d, dtype=np.float64)
    if d_means2d.shape != (m, 2) or d_covs2d.shape != (m, 2, 2):
        raise InvalidParameterError("project_backward: gradient shapes mismatch cache")

    d_sym = 0.5 * (d_covs2d + np.transpose(d_covs2d, (0, 2, 1)))

    # cov2d = A cov3d A^T  (A = J R_cam): dA and dcov3d.
    d_affine = 2.0 * np.einsum("nij,njk,nkl->nil", d_sym, cache.affine, cache.cov3d)
    d_cov3d = np.einsum("nki,nkl,nlj->nij", cache.affine, d_sym, cache.affine)

    # A = J R_cam: dJ = dA R_cam^T.
    d_jac = d_affine @ cache.cam_rot.T

    x = cache.p_cam[:, 0]
    y = cache.p_cam[:, 1]
    z = cache.p_cam[:, 2]
    fx, fy = cache.fx, cache.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z

    d_p = np.zeros((m, 3))
    # mean2d = (fx x/z + cx, fy y/z + cy)
    d_p[:, 0] += d_means2d[:, 0] * fx * inv_z
    d_p[:, 1] += d_means2d[:, 1] * fy * inv_z
    d_p[:, 2] += -(d_means2d[:, 0] * fx * x + d_means2d[:, 1] * fy * y) * inv_z2
    # J entries depend on (x, y, z).
    d_p[:, 0] += d_jac[:, 0, 2] * (-fx * inv_z2)
    d_p[:, 1] += d_jac[:, 1, 2] * (-fy * inv_z2)
    d_p[:, 2] += (
        d_jac[:, 0, 0] * (-fx * inv_z2)
        + d_jac[:, 1, 1] * (-fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
    )

    d_positions_rows = d_p @ cache.cam_rot

    # cov3d = Rot diag(var) Rot^T.
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_cov3d, cache.rotmats, cache.variances)
    d_var = np.einsum("nij,nik,njk->nk", d_cov3d, cache.rotmats, cache.rotmats)
    d_log_scales_rows = d_var * 2.0 * cache.variances
    d_quats_rows = quat_backward(cache.quats_raw, d_rot)

    return d_positions_rows, d_log_scales_rows, d_quats_rows
