"""Dual-modality alpha compositing over depth-sorted projected Gaussians.

One traversal carries two independent transmittance chains: color channels
are blended with the opacity o, language channels with the semantic
indicator l. Per pixel v, with per-Gaussian screen weight P and fused
channels u = fuse(c, f):

    C(v) = sum_i u^i[:d_c]  * o^i * P^i * prod_{j<i} (1 - o^j P^j)
    F(v) = sum_i u^i[d_c:]  * l^i * P^i * prod_{j<i} (1 - l^j P^j)

Skipping a Gaussian in one chain (contribution floor, early stop) leaves the
other chain untouched. Background is black / zero-feature.

Three evaluation paths share the same per-pixel arithmetic:
  * a sequential per-Gaussian path that can record the per-contribution
    state needed by the backward pass,
  * a 16x16-tiled path, bitwise identical to the sequential one,
  * ``rasterize_reference``, an independent oracle that materializes full
    per-Gaussian alpha tensors and composites by batched cumulative
    products in extended precision.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidParameterError, InvalidStateError
from .fusion import AttentionWeights, FusionModel, fuse_batch, fuse_backward_batch
from .projection import FOOTPRINT_SIGMA, ProjectionBatch, project_batch, project_backward
from .scene import Camera, GaussianCloud, activate

COLOR_DIM = 3
CONTRIBUTION_FLOOR = 1.0 / 255.0
STOP_TRANSMITTANCE = 1e-4
INDICATOR_KINDS = ("dual", "color_opacity", "fixed")


@dataclasses.dataclass(frozen=True)
class IndicatorMode:
    """How the language-chain blending scalar l is obtained.

    dual: l = sigmoid(indicator_logits), the learned indicator.
    color_opacity: l = o (ablation; ties both chains to one scalar).
    fixed: l = value for every Gaussian (ablation).
    """

    kind: str = "dual"
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in INDICATOR_KINDS:
            raise InvalidParameterError(f"unknown indicator mode {self.kind!r}")
        if self.kind == "fixed" and not (0.0 < self.value <= 1.0):
            raise InvalidParameterError("fixed indicator value must lie in (0, 1]")

    @staticmethod
    def parse(text: str) -> "IndicatorMode":
        """Accepts dual|learned, color_opacity|opacity, fixed:VALUE."""
        if text in ("dual", "learned"):
            return IndicatorMode("dual")
        if text in ("color_opacity", "opacity"):
            return IndicatorMode("color_opacity")
        if text.startswith("fixed:"):
            try:
                return IndicatorMode("fixed", float(text.split(":", 1)[1]))
            except ValueError as exc:
                raise InvalidParameterError(f"bad fixed indicator value in {text!r}") from exc
        raise InvalidParameterError(f"unknown indicator mode {text!r}")

    def describe(self) -> str:
        return f"fixed:{self.value:g}" if self.kind == "fixed" else self.kind


@dataclasses.dataclass
class RasterConfig:
    tile_size: int = 16
    use_tiles: bool = False
    contribution_floor: float = CONTRIBUTION_FLOOR
    stop_transmittance: float = STOP_TRANSMITTANCE
    # Gradient checks against finite differences need every gating decision
    # removed: an unbounded footprint kills the 3-sigma bbox edges, zero
    # thresholds make the skip masks all-true.
    unbounded_footprint: bool = False

    def footprint_sigma(self) -> float:
        return math.inf if self.unbounded_footprint else FOOTPRINT_SIGMA

    @staticmethod
    def quality() -> "RasterConfig":
        """Thresholds off: renders agree with the reference to float precision."""
        return RasterConfig(contribution_floor=0.0, stop_transmittance=0.0)

    @staticmethod
    def gradcheck() -> "RasterConfig":
        """Quality thresholds plus an unbounded footprint: the forward pass
        has no piecewise-constant gates, so finite differences are clean."""
        return RasterConfig(contribution_floor=0.0, stop_transmittance=0.0, unbounded_footprint=True)

    def validate(self):
        if self.tile_size < 1:
            raise InvalidParameterError("tile_size must be >= 1")
        if self.contribution_floor < 0 or self.stop_transmittance < 0:
            raise InvalidParameterError("thresholds must be >= 0")


@dataclasses.dataclass
class ContribRecord:
    """Forward-pass state of one Gaussian's bbox window, kept for backward."""

    row: int            # row index into the projection batch
    bbox: tuple         # (r0, r1, c0, c1) inclusive
    weight: np.ndarray  # P over the window
    tc_before: np.ndarray | None  # color transmittance entering this Gaussian
    mask_c: np.ndarray | None     # pixels where the color chain contributed
    tl_before: np.ndarray
    mask_l: np.ndarray


@dataclasses.dataclass
class RenderAux:
    """Everything the backward pass needs from a forward render."""

    camera: Camera
    mode: IndicatorMode
    config: RasterConfig
    channels: str  # "both" or "semantics"
    cloud_n: int
    color_dim: int
    batch: ProjectionBatch
    projection_cache: object
    fusion_cache: dict
    u_rows: np.ndarray  # (M, D) fused channels of surviving Gaussians
    o_rows: np.ndarray  # (M,)
    l_rows: np.ndarray  # (M,)
    records: list
    t_color: np.ndarray | None  # (H, W) final color transmittance
    t_lang: np.ndarray          # (H, W) final language transmittance


@dataclasses.dataclass
class RenderOutput:
    color: np.ndarray | None  # (H, W, 3)
    semantics: np.ndarray     # (H, W, d_f)
    aux: RenderAux | None


def language_opacities(cloud: GaussianCloud, mode: IndicatorMode, opacities: np.ndarray) -> np.ndarray:
    if mode.kind == "dual":
        return activate(cloud.indicator_logits)
    if mode.kind == "color_opacity":
        return opacities
    return np.full(cloud.n, float(mode.value))


def _as_model(fusion, feature_dim: int) -> FusionModel:
    if isinstance(fusion, AttentionWeights):
        return FusionModel(kind="self", color_dim=COLOR_DIM, feature_dim=feature_dim, attention=fusion)
    return fusion


def _weight_window(mean2d: np.ndarray, inv_cov: np.ndarray, bbox) -> np.ndarray:
    """exp(-0.5 d^T inv_cov d) over an inclusive pixel window."""
    r0, r1, c0, c1 = bbox
    dx = np.arange(c0, c1 + 1, dtype=np.float64) - mean2d[0]
    dy = np.arange(r0, r1 + 1, dtype=np.float64) - mean2d[1]
    dx = dx[None, :]
    dy = dy[:, None]
    cross = inv_cov[0, 1] + inv_cov[1, 0]
    q = inv_cov[0, 0] * dx * dx + cross * dx * dy + inv_cov[1, 1] * dy * dy
    return np.exp(-0.5 * q)


def _composite_window(target, trans, u_vec, alpha, mask, r0, c0):
    """Front-to-back update of one chain on one window; returns t_before copy.

    target: (H, W, C) accumulator image; trans: (H, W) running transmittance.
    alpha/mask are window-shaped. The same helper serves the sequential and
    tiled schedules so their per-pixel arithmetic is identical.
    """
    h, w = alpha.shape
    t_win = trans[r0 : r0 + h, c0 : c0 + w]
    t_before = t_win.copy()
    contrib = np.where(mask, alpha * t_before, 0.0)
    target[r0 : r0 + h, c0 : c0 + w] += contrib[:, :, None] * u_vec
    trans[r0 : r0 + h, c0 : c0 + w] = np.where(mask, t_before * (1.0 - alpha), t_before)
    return t_before


def _chain_masks(alpha, t_before, floor, stop):
    return (t_before > stop) & (alpha >= floor)


def _forward_sequential(batch, u_rows, o_rows, l_rows, height, width, d_c, config, channels, want_aux):
    d_f = u_rows.shape[1] - d_c
    want_color = channels == "both"
    color = np.zeros((height, width, d_c)) if want_color else None
    semantics = np.zeros((height, width, d_f))
    t_c = np.ones((height, width)) if want_color else None
    t_l = np.ones((height, width))
    records = [] if want_aux else None
    floor = config.contribution_floor
    stop = config.stop_transmittance

    for m in range(len(batch)):
        bbox = tuple(batch.bboxes[m])
        r0, r1, c0, c1 = bbox
        weight = _weight_window(batch.means2d[m], batch.inv_covs2d[m], bbox)

        tc_before = mask_c = None
        if want_color:
            alpha_c = o_rows[m] * weight
            mask_c = _chain_masks(alpha_c, t_c[r0 : r1 + 1, c0 : c1 + 1], floor, stop)
            tc_before = _composite_window(color, t_c, u_rows[m, :d_c], alpha_c, mask_c, r0, c0)

        alpha_l = l_rows[m] * weight
        mask_l = _chain_masks(alpha_l, t_l[r0 : r1 + 1, c0 : c1 + 1], floor, stop)
        tl_before = _composite_window(semantics, t_l, u_rows[m, d_c:], alpha_l, mask_l, r0, c0)

        if want_aux:
            records.append(ContribRecord(m, bbox, weight, tc_before, mask_c, tl_before, mask_l))

    return color, semantics, t_c, t_l, records


def _forward_tiled(batch, u_rows, o_rows, l_rows, height, width, d_c, config):
    d_f = u_rows.shape[1] - d_c
    color = np.zeros((height, width, d_c))
    semantics = np.zeros((height, width, d_f))
    t_c = np.ones((height, width))
    t_l = np.ones((height, width))
    floor = config.contribution_floor
    stop = config.stop_transmittance
    ts = config.tile_size

    for tile_r0 in range(0, height, ts):
        tile_r1 = min(tile_r0 + ts, height) - 1
        for tile_c0 in range(0, width, ts):
            tile_c1 = min(tile_c0 + ts, width) - 1
            for m in range(len(batch)):
                r0, r1, c0, c1 = batch.bboxes[m]
                w0, w1 = max(r0, tile_r0), min(r1, tile_r1)
                v0, v1 = max(c0, tile_c0), min(c1, tile_c1)
                if w0 > w1 or v0 > v1:
                    continue
                bbox = (w0, w1, v0, v1)
                weight = _weight_window(batch.means2d[m], batch.inv_covs2d[m], bbox)

                alpha_c = o_rows[m] * weight
                mask_c = _chain_masks(alpha_c, t_c[w0 : w1 + 1, v0 : v1 + 1], floor, stop)
                _composite_window(color, t_c, u_rows[m, :d_c], alpha_c, mask_c, w0, v0)

                alpha_l = l_rows[m] * weight
                mask_l = _chain_masks(alpha_l, t_l[w0 : w1 + 1, v0 : v1 + 1], floor, stop)
                _composite_window(semantics, t_l, u_rows[m, d_c:], alpha_l, mask_l, w0, v0)

    return color, semantics, t_c, t_l


def rasterize(
    cloud: GaussianCloud,
    camera: Camera,
    fusion,
    mode: IndicatorMode = IndicatorMode("dual"),
    config: RasterConfig | None = None,
    want_aux: bool = False,
    channels: str = "both",
) -> RenderOutput:
    """Differentiable forward render. ``fusion`` is a FusionModel or raw
    AttentionWeights (treated as the default self-attention fusion).

    channels="semantics" skips the color chain entirely (the language chain
    does not depend on it); such renders only admit dF gradients.
    """
    if channels not in ("both", "semantics"):
        raise InvalidParameterError(f"unknown channels selector {channels!r}")
    config = config if config is not None else RasterConfig()
    config.validate()
    model = _as_model(fusion, cloud.feature_dim)
    if model.token_dim != COLOR_DIM + cloud.feature_dim:
        raise InvalidParameterError("fusion width does not match cloud channels")

    batch, pcache = project_batch(cloud, camera, footprint_sigma=config.footprint_sigma())
    opac = cloud.opacities()
    lang = language_opacities(cloud, mode, opac)
    x = np.concatenate([cloud.colors, cloud.features], axis=1)
    u, fusion_cache = fuse_batch(model, x)

    idx = batch.indices
    u_rows = u[idx]
    o_rows = opac[idx]
    l_rows = lang[idx]

    use_tiles = config.use_tiles and not want_aux and channels == "both"
    if use_tiles:
        color, semantics, t_c, t_l = _forward_tiled(
            batch, u_rows, o_rows, l_rows, camera.height, camera.width, COLOR_DIM, config
        )
        records = None
    else:
        color, semantics, t_c, t_l, records = _forward_sequential(
            batch, u_rows, o_rows, l_rows, camera.height, camera.width, COLOR_DIM, config, channels, want_aux
        )

    aux = None
    if want_aux:
        aux = RenderAux(
            camera=camera,
            mode=mode,
            config=config,
            channels=channels,
            cloud_n=cloud.n,
            color_dim=COLOR_DIM,
            batch=batch,
            projection_cache=pcache,
            fusion_cache=fusion_cache,
            u_rows=u_rows,
            o_rows=o_rows,
            l_rows=l_rows,
            records=records,
            t_color=t_c,
            t_lang=t_l,
        )
    return RenderOutput(color=color, semantics=semantics, aux=aux)


def rasterize_reference(
    cloud: GaussianCloud,
    camera: Camera,
    fusion,
    mode: IndicatorMode = IndicatorMode("dual"),
    config: RasterConfig | None = None,
    return_language_weights: bool = False,
):
    """Oracle renderer: same semantics as :func:`rasterize`, different
    algorithm. Builds dense (M, H, W) alpha tensors and composites with
    exclusive cumulative products in extended precision; the thresholds act
    through masking (a skipped contribution is an alpha of zero, a stopped
    pixel masks everything once transmittance falls to the stop value).

    With ``return_language_weights`` also returns the (M, H, W) per-Gaussian
    language blending weights l*P*T aligned with the projection batch rows,
    which the synthetic-scene generator uses to derive label maps.
    """
    config = config if config is not None else RasterConfig()
    config.validate()
    model = _as_model(fusion, cloud.feature_dim)
    batch, _ = project_batch(cloud, camera, footprint_sigma=config.footprint_sigma())
    opac = cloud.opacities()
    lang = language_opacities(cloud, mode, opac)
    x = np.concatenate([cloud.colors, cloud.features], axis=1)
    u, _ = fuse_batch(model, x)

    h, w = camera.height, camera.width
    m = len(batch)
    weight = np.zeros((m, h, w), dtype=np.longdouble)
    for i in range(m):
        r0, r1, c0, c1 = batch.bboxes[i]
        weight[i, r0 : r1 + 1, c0 : c1 + 1] = _weight_window(
            batch.means2d[i], batch.inv_covs2d[i], (r0, r1, c0, c1)
        )

    u_rows = u[batch.indices].astype(np.longdouble)

    def chain(scalars):
        alpha = scalars[batch.indices, None, None].astype(np.longdouble) * weight
        alpha_eff = np.where(alpha >= config.contribution_floor, alpha, 0.0)
        trans = np.cumprod(1.0 - alpha_eff, axis=0)
        t_before = np.concatenate([np.ones((1, h, w), dtype=np.longdouble), trans[:-1]], axis=0)
        return np.where(t_before > config.stop_transmittance, alpha_eff * t_before, 0.0)

    weights_c = chain(opac)
    weights_l = chain(lang)
    color = np.einsum("mhw,mc->hwc", weights_c, u_rows[:, :COLOR_DIM]).astype(np.float64)
    semantics = np.einsum("mhw,mc->hwc", weights_l, u_rows[:, COLOR_DIM:]).astype(np.float64)
    out = RenderOutput(color=color, semantics=semantics, aux=None)
    if return_language_weights:
        return out, weights_l.astype(np.float64)
    return out


@dataclasses.dataclass
class RasterGrads:
    """Gradients of <dC, C> + <dF, F> w.r.t. every trainable input."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    indicator_logits: np.ndarray
    fusion: dict

    def cloud_items(self):
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
            "features": self.features,
            "indicator_logits": self.indicator_logits,
        }


def _backward_chain(records, which, d_image, u_rows, scalar_rows, accum, d_u, d_scalar, d_weight):
    """Back-to-front pass of one modality chain.

    which selects the color ("c") or language ("l") record fields; d_image is
    the upstream gradient image restricted to that chain's channels; accum is
    the running suffix composite (same channel count). d_u rows receive the
    chain's channel gradients; d_scalar the per-Gaussian opacity/indicator
    gradient; d_weight the per-Gaussian, per-window dP accumulation (list of
    window arrays aligned with records, filled in reverse order).
    """
    for rec_pos in range(len(records) - 1, -1, -1):
        rec = records[rec_pos]
        mask = rec.mask_c if which == "c" else rec.mask_l
        t_before = rec.tc_before if which == "c" else rec.tl_before
        if mask is None or not mask.any():
            continue
        r0, r1, c0, c1 = rec.bbox
        u_vec = u_rows[rec.row]
        scalar = scalar_rows[rec.row]
        alpha = np.where(mask, scalar * rec.weight, 0.0)

        d_win = d_image[r0 : r1 + 1, c0 : c1 + 1]
        a_win = accum[r0 : r1 + 1, c0 : c1 + 1]
        dot = np.einsum("hwc,c->hw", d_win, u_vec) - np.einsum("hwc,hwc->hw", d_win, a_win)
        d_alpha = np.where(mask, t_before * dot, 0.0)

        contrib_w = np.where(mask, alpha * t_before, 0.0)
        d_u[rec.row] += np.einsum("hw,hwc->c", contrib_w, d_win)
        d_scalar[rec.row] += float(np.sum(d_alpha * rec.weight))
        d_weight[rec_pos] += scalar * d_alpha

        new_acc = alpha[:, :, None] * u_vec + (1.0 - alpha)[:, :, None] * a_win
        accum[r0 : r1 + 1, c0 : c1 + 1] = np.where(mask[:, :, None], new_acc, a_win)


def rasterize_backward(
    cloud: GaussianCloud,
    camera: Camera,
    fusion,
    d_color: np.ndarray | None,
    d_semantics: np.ndarray,
    aux: RenderAux,
) -> RasterGrads:
    """Exact gradients of <d_color, C> + <d_semantics, F> for a forward pass
    that recorded aux. Gating decisions (floors, stops, footprints, depth
    order) are constants of the forward pass.

    In dual mode the indicator gets gradient only through the language chain
    and the opacity only through the color chain; color_opacity mode folds
    the language-chain gradient into the opacity; fixed mode discards it.
    """
    if aux is None or aux.records is None:
        raise InvalidStateError("rasterize_backward requires aux from a forward pass with want_aux=True")
    if not aux.camera.same_view(camera):
        raise InvalidStateError("aux was built for a different camera")
    if aux.cloud_n != cloud.n:
        raise InvalidStateError("aux was built for a different cloud size")
    h, w = camera.height, camera.width
    d_f = cloud.feature_dim
    if d_semantics.shape != (h, w, d_f):
        raise InvalidParameterError(f"d_semantics: expected {(h, w, d_f)}, got {d_semantics.shape}")
    if d_color is not None and d_color.shape != (h, w, COLOR_DIM):
        raise InvalidParameterError(f"d_color: expected {(h, w, COLOR_DIM)}, got {d_color.shape}")
    if d_color is not None and np.any(d_color) and aux.channels != "both":
        raise InvalidStateError("aux came from a semantics-only render; color gradients unavailable")

    batch = aux.batch
    records = aux.records
    m = len(batch)
    d = COLOR_DIM + d_f

    d_u_rows = np.zeros((m, d))
    d_o_rows = np.zeros(m)
    d_l_rows = np.zeros(m)
    d_weight = [np.zeros_like(rec.weight) for rec in records]

    if d_color is not None and aux.channels == "both":
        accum_c = np.zeros((h, w, COLOR_DIM))
        _backward_chain(
            records, "c", d_color, aux.u_rows[:, :COLOR_DIM], aux.o_rows, accum_c,
            d_u_rows[:, :COLOR_DIM], d_o_rows, d_weight,
        )
    accum_l = np.zeros((h, w, d_f))
    _backward_chain(
        records, "l", d_semantics, aux.u_rows[:, COLOR_DIM:], aux.l_rows, accum_l,
        d_u_rows[:, COLOR_DIM:], d_l_rows, d_weight,
    )

    # Screen-weight gradients into the projected mean and covariance:
    # dP/dmean = P * (A d), dP/dcov = P/2 * (A d)(A d)^T with A the 2x2
    # inverse covariance and d = pixel - mean.
    d_means2d = np.zeros((m, 2))
    d_covs2d = np.zeros((m, 2, 2))
    for rec_pos, rec in enumerate(records):
        dw = d_weight[rec_pos]
        if not np.any(dw):
            continue
        r0, r1, c0, c1 = rec.bbox
        mean = batch.means2d[rec.row]
        inv = batch.inv_covs2d[rec.row]
        dx = np.arange(c0, c1 + 1, dtype=np.float64) - mean[0]
        dy = np.arange(r0, r1 + 1, dtype=np.float64) - mean[1]
        dxg = np.broadcast_to(dx[None, :], rec.weight.shape)
        dyg = np.broadcast_to(dy[:, None], rec.weight.shape)
        ax = inv[0, 0] * dxg + inv[0, 1] * dyg
        ay = inv[1, 0] * dxg + inv[1, 1] * dyg
        g = dw * rec.weight
        d_means2d[rec.row, 0] += float(np.sum(g * ax))
        d_means2d[rec.row, 1] += float(np.sum(g * ay))
        d_covs2d[rec.row, 0, 0] += 0.5 * float(np.sum(g * ax * ax))
        d_covs2d[rec.row, 0, 1] += 0.5 * float(np.sum(g * ax * ay))
        d_covs2d[rec.row, 1, 0] += 0.5 * float(np.sum(g * ay * ax))
        d_covs2d[rec.row, 1, 1] += 0.5 * float(np.sum(g * ay * ay))

    d_pos_rows, d_ls_rows, d_quat_rows = project_backward(aux.projection_cache, d_means2d, d_covs2d)
    idx = batch.indices
    positions = np.zeros((cloud.n, 3))
    log_scales = np.zeros((cloud.n, 3))
    rotations = np.zeros((cloud.n, 4))
    positions[idx] = d_pos_rows
    log_scales[idx] = d_ls_rows
    rotations[idx] = d_quat_rows

    d_u = np.zeros((cloud.n, d))
    d_opac = np.zeros(cloud.n)
    d_lang = np.zeros(cloud.n)
    d_u[idx] = d_u_rows
    d_opac[idx] = d_o_rows
    d_lang[idx] = d_l_rows

    model = _as_model(fusion, d_f)
    dx_channels, fusion_grads = fuse_backward_batch(model, aux.fusion_cache, d_u)
    colors = dx_channels[:, :COLOR_DIM]
    features = dx_channels[:, COLOR_DIM:]

    opac = cloud.opacities()
    indicator_logits = np.zeros(cloud.n)
    if aux.mode.kind == "dual":
        lang = activate(cloud.indicator_logits)
        opacity_logits = d_opac * opac * (1.0 - opac)
        indicator_logits = d_lang * lang * (1.0 - lang)
    elif aux.mode.kind == "color_opacity":
        opacity_logits = (d_opac + d_lang) * opac * (1.0 - opac)
    else:  # fixed: l is a constant
        opacity_logits = d_opac * opac * (1.0 - opac)

    return RasterGrads(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        colors=colors,
        features=features,
        indicator_logits=indicator_logits,
        fusion=fusion_grads,
    )
