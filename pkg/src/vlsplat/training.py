"""Losses, Adam with per-group learning rates, and the two-view training loop.

Each iteration samples two distinct views, renders both, and (when blending
is active) renders a third, synthesized view between them:

    L = raster_loss(view1) + raster_loss(view2) + lambda * blend_loss

The blend term supervises only the semantic channels; the blended pose and
GT map are constants for optimization. lambda = 0 or a disabled blend skips
the blend render entirely, so such runs consume identical random streams and
produce identical traces.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import warnings

import numpy as np

from .augmentation import BlendConfig, BlendSample, make_blend_sample, ssim
from .errors import InvalidParameterError, NumericError
from .fusion import ATTN_DIM_DEFAULT, FusionModel, make_fusion_model
from .rasterizer import (
    COLOR_DIM,
    IndicatorMode,
    RasterConfig,
    RasterGrads,
    RenderOutput,
    rasterize,
    rasterize_backward,
)
from .scene import Dataset, GaussianCloud, TrainSample

LR_DEFAULTS = {
    "position": 1.6e-4,
    "scale": 5e-3,
    "rotation": 1e-3,
    "color": 5e-3,
    "opacity": 5e-2,
    "feature": 5e-3,
    "indicator": 5e-2,
    "attention": 5e-3,
}

_CLOUD_GROUPS = {
    "positions": "position",
    "log_scales": "scale",
    "rotations": "rotation",
    "opacity_logits": "opacity",
    "colors": "color",
    "features": "feature",
    "indicator_logits": "indicator",
}


def param_group(name: str) -> str:
    if name in _CLOUD_GROUPS:
        return _CLOUD_GROUPS[name]
    if name.startswith("fusion."):
        return "attention"
    raise InvalidParameterError(f"unknown parameter {name!r}")


def trainable_parameters(cloud: GaussianCloud, fusion: FusionModel) -> dict:
    """Name -> live array view of everything the optimizer may update."""
    params = {
        "positions": cloud.positions,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors,
        "features": cloud.features,
        "indicator_logits": cloud.indicator_logits,
    }
    params.update(fusion.parameters())
    return params


@dataclasses.dataclass
class TrainConfig:
    iterations: int = 15000
    blend_lambda: float = 1.2
    seed: int = 0
    learning_rates: dict = dataclasses.field(default_factory=lambda: dict(LR_DEFAULTS))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fusion_kind: str = "self"
    attn_dim: int = ATTN_DIM_DEFAULT
    indicator: IndicatorMode = IndicatorMode("dual")
    blend: BlendConfig = BlendConfig()
    raster: RasterConfig = dataclasses.field(default_factory=RasterConfig)

    def validate(self):
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        if self.blend_lambda < 0:
            raise InvalidParameterError("blend_lambda must be >= 0")
        for group in LR_DEFAULTS:
            rate = self.learning_rates.get(group)
            if rate is None or rate <= 0:
                raise InvalidParameterError(f"learning rate for group {group!r} must be > 0")
        self.raster.validate()

    def to_dict(self) -> dict:
        blend_name, ratio_name = self.blend.describe()
        return {
            "iterations": self.iterations,
            "blend_lambda": self.blend_lambda,
            "seed": self.seed,
            "learning_rates": {k: self.learning_rates[k] for k in sorted(self.learning_rates)},
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "fusion_kind": self.fusion_kind,
            "attn_dim": self.attn_dim,
            "indicator": self.indicator.describe(),
            "blend": blend_name,
            "ratio": ratio_name,
            "raster": {
                "tile_size": self.raster.tile_size,
                "use_tiles": self.raster.use_tiles,
                "contribution_floor": self.raster.contribution_floor,
                "stop_transmittance": self.raster.stop_transmittance,
                "unbounded_footprint": self.raster.unbounded_footprint,
            },
        }


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def raster_loss(out: RenderOutput, sample: TrainSample) -> float:
    """MSE(color, image) + MSE(semantics, gt_features), each averaged over
    pixels and channels."""
    if out.color is None or out.color.shape != sample.image.shape:
        raise InvalidParameterError("raster_loss: color/image shape mismatch")
    if out.semantics.shape != sample.gt_features.shape:
        raise InvalidParameterError("raster_loss: semantics/gt shape mismatch")
    return float(np.mean((out.color - sample.image) ** 2) + np.mean((out.semantics - sample.gt_features) ** 2))


def blend_loss(rendered_b: np.ndarray, blend: BlendSample) -> float:
    """SSIM-weighted MSE on the semantic channels of the blended view."""
    if rendered_b.shape != blend.gt_b.shape:
        raise InvalidParameterError("blend_loss: shape mismatch")
    return float(blend.weight * np.mean((rendered_b - blend.gt_b) ** 2))


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] images."""
    mse = float(np.mean((np.asarray(image) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclasses.dataclass
class AdamState:
    m: dict
    v: dict
    steps: dict

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            steps={k: 0 for k in params},
        )


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, groups=None):
    """One bias-corrected Adam update, in place.

    params/grads are dicts name -> array; lr is a scalar rate or a dict
    group -> rate with ``groups`` mapping names to groups (identity when
    omitted). A non-finite gradient skips the whole affected group for this
    step with a warning; the rest of the groups still update.
    """
    groups = groups if groups is not None else {name: name for name in params}
    bad = sorted({groups[name] for name in params if not np.all(np.isfinite(grads[name]))})
    for group in bad:
        warnings.warn(f"non-finite gradient: skipping update of group {group!r}", RuntimeWarning)
    bad = set(bad)
    for name, arr in params.items():
        if groups[name] in bad:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        t = state.steps[name] + 1
        state.steps[name] = t
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        rate = lr[groups[name]] if isinstance(lr, dict) else lr
        arr -= rate * m_hat / (np.sqrt(v_hat) + eps)


def _accumulate(total: dict, raster_grads: RasterGrads):
    for name, g in raster_grads.cloud_items().items():
        total[name] += g
    for name, g in raster_grads.fusion.items():
        total[name] += g


def compute_objective(
    cloud: GaussianCloud,
    fusion: FusionModel,
    mode: IndicatorMode,
    s1: TrainSample,
    s2: TrainSample,
    blend: BlendSample | None,
    blend_lambda: float,
    raster_cfg: RasterConfig,
    want_grads: bool,
):
    """Total objective over one view pair (+ optional blend view).

    Returns (losses, grads): losses has keys l1/l2/lb/total; grads is a dict
    keyed like trainable_parameters, or None. The same routine serves the
    training loop and finite-difference checks of the full objective.
    """
    out1 = rasterize(cloud, s1.camera, fusion, mode, raster_cfg, want_aux=want_grads)
    out2 = rasterize(cloud, s2.camera, fusion, mode, raster_cfg, want_aux=want_grads)
    l1 = raster_loss(out1, s1)
    l2 = raster_loss(out2, s2)
    lb = 0.0
    out_b = None
    if blend is not None:
        out_b = rasterize(
            cloud, blend.pose_b, fusion, mode, raster_cfg, want_aux=want_grads, channels="semantics"
        )
        lb = blend_loss(out_b.semantics, blend)
    losses = {"l1": l1, "l2": l2, "lb": lb, "total": l1 + l2 + blend_lambda * lb}
    if not want_grads:
        return losses, None

    grads = {name: np.zeros_like(arr) for name, arr in trainable_parameters(cloud, fusion).items()}
    for out, sample in ((out1, s1), (out2, s2)):
        d_color = (2.0 / out.color.size) * (out.color - sample.image)
        d_sem = (2.0 / out.semantics.size) * (out.semantics - sample.gt_features)
        _accumulate(grads, rasterize_backward(cloud, sample.camera, fusion, d_color, d_sem, out.aux))
    if blend is not None:
        scale = blend_lambda * blend.weight * 2.0 / out_b.semantics.size
        d_sem_b = scale * (out_b.semantics - blend.gt_b)
        _accumulate(grads, rasterize_backward(cloud, blend.pose_b, fusion, None, d_sem_b, out_b.aux))
    return losses, grads


def train_step(
    cloud: GaussianCloud,
    fusion: FusionModel,
    s1: TrainSample,
    s2: TrainSample,
    cfg: TrainConfig,
    adam: AdamState,
    rng,
    ssim_weight: float | None = None,
) -> dict:
    """One optimization step on a given view pair; mutates cloud/fusion.

    ssim_weight, when provided, substitutes the (expensive, pair-constant)
    SSIM computation inside the blend sampler.
    """
    blending = cfg.blend.enabled and cfg.blend_lambda > 0.0
    blend = None
    if blending:
        blend = make_blend_sample(s1, s2, rng, cfg.blend, ssim_weight=ssim_weight)
    losses, grads = compute_objective(
        cloud, fusion, cfg.indicator, s1, s2, blend, cfg.blend_lambda, cfg.raster, want_grads=True
    )
    if not math.isfinite(losses["total"]):
        raise NumericError(
            "non-finite training loss: "
            f"l1={losses['l1']} l2={losses['l2']} lb={losses['lb']}"
        )
    params = trainable_parameters(cloud, fusion)
    groups = {name: param_group(name) for name in params}
    adam_step(params, grads, adam, cfg.learning_rates, cfg.beta1, cfg.beta2, cfg.eps, groups=groups)
    return losses


@dataclasses.dataclass
class TrainResult:
    cloud: GaussianCloud
    fusion: FusionModel
    trace: list  # rows (iteration, l1, l2, lb, total)
    adam: AdamState


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    init_cloud: GaussianCloud,
    fusion: FusionModel | None = None,
    callback=None,
) -> TrainResult:
    """Run the training loop from an initial cloud.

    The fusion model, when not supplied, is built from cfg.fusion_kind with
    the run's seed. callback(iteration, cloud, fusion, adam, losses), when
    given, fires after every step (checkpointing hooks go there).
    Deterministic for a fixed seed: the only random consumers are the view
    pair choice and, when blending is active, the ratio sampler.
    """
    cfg.validate()
    cloud = init_cloud.copy()
    rng = np.random.default_rng(cfg.seed)
    if fusion is None:
        fusion = make_fusion_model(cfg.fusion_kind, COLOR_DIM, cloud.feature_dim, cfg.attn_dim, rng)
    else:
        fusion = fusion.copy()
    if cfg.iterations > 0 and len(dataset) < 2:
        raise InvalidParameterError("training requires at least two views")

    params = trainable_parameters(cloud, fusion)
    adam = AdamState.init(params)
    trace = []
    ssim_cache: dict = {}
    use_cache = cfg.blend.enabled and cfg.blend_lambda > 0.0 and cfg.blend.use_ssim_weight

    for iteration in range(1, cfg.iterations + 1):
        i, j = (int(x) for x in rng.choice(len(dataset), size=2, replace=False))
        s1, s2 = dataset[i], dataset[j]
        weight = None
        if use_cache:
            key = (min(i, j), max(i, j))
            if key not in ssim_cache:
                ssim_cache[key] = ssim(s1.image, s2.image)
            weight = ssim_cache[key]
        losses = train_step(cloud, fusion, s1, s2, cfg, adam, rng, ssim_weight=weight)
        trace.append((iteration, losses["l1"], losses["l2"], losses["lb"], losses["total"]))
        if callback is not None:
            callback(iteration, cloud, fusion, adam, losses)
    return TrainResult(cloud=cloud, fusion=fusion, trace=trace, adam=adam)


def write_loss_trace(path, trace):
    """CSV with columns (iter, L1, L2, Lb, total); floats via repr so equal
    runs produce equal bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "L1", "L2", "Lb", "total"])
        for row in trace:
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def view_mse(cloud, fusion, mode, sample, config=None):
    """Held-out color / semantic MSE of a quality render against a sample."""
    out = rasterize(cloud, sample.camera, fusion, mode, config or RasterConfig.quality())
    color_mse = float(np.mean((out.color - sample.image) ** 2))
    feature_mse = float(np.mean((out.semantics - sample.gt_features) ** 2))
    return color_mse, feature_mse
