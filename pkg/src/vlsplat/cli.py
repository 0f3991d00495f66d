"""Command-line entry point.

Exit codes: 0 success, 1 usage/parameter error, 2 data error, 3 numeric or
state failure. Every command is deterministic under a fixed --seed; the
--deterministic flag additionally forces sequential execution where a worker
pool would otherwise be used (results are identical either way, the flag
pins the schedule).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from .augmentation import BlendConfig
from .colormap import heatmap
from .dataset_io import (
    CheckpointState,
    SceneData,
    camera_from_dict,
    load_checkpoint,
    load_scene,
    read_json,
    save_checkpoint,
    write_image,
    write_json,
    write_tensor,
)
from .errors import DataError, InvalidParameterError, InvalidStateError, NumericError
from .query import localization_accuracy, mean_iou, relevancy, segment
from .query import BACKGROUND_NORM_FLOOR, decode_labels
from .rasterizer import IndicatorMode, RasterConfig, language_opacities, rasterize
from .synthetic import SyntheticSpec, generate_synthetic
from .training import (
    TrainConfig,
    config_digest,
    psnr,
    train,
    write_loss_trace,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

HISTOGRAM_BINS = 256


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="base RNG seed")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force sequential, fixed-order execution",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="write a synthetic labeled scene")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--size", default="64x64", help="WxH")
    p.add_argument("--glare", action="store_true")
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--arc", type=float, default=360.0, help="camera ring coverage in degrees")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="optimize a scene from its init checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--iters", type=int, default=15000)
    p.add_argument("--lambda", dest="blend_lambda", type=float, default=1.2)
    p.add_argument("--fusion", default="self", choices=["self", "none", "mlp1", "cross"])
    p.add_argument("--indicator", default="learned")
    p.add_argument("--blend", default="full", choices=["full", "no-rot", "no-trans", "no-ssim", "off"])
    p.add_argument("--ratio", default="beta")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render color, heatmaps, and the l-o histogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="frame:i, inline JSON, or a JSON file")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--norm-floor", type=float, default=0.0)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="segmentation / localization metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mode", default="segment", choices=["segment", "localize"])
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--norm-floor", type=float, default=BACKGROUND_NORM_FLOOR)
    p.add_argument("--out", default="metrics.json")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval over a variant grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--grid", required=True, help="axis=v1,v2[;axis=...]")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lambda", dest="blend_lambda", type=float, default=1.2)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise InvalidParameterError(f"--size expects WxH, got {text!r}")
    try:
        width, height = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise InvalidParameterError(f"--size expects integers, got {text!r}") from exc
    return width, height


def cmd_generate(args) -> int:
    width, height = _parse_size(args.size)
    spec = SyntheticSpec(
        n_objects=args.objects,
        n_views=args.views,
        width=width,
        height=height,
        seed=args.seed,
        glare=args.glare,
        feature_noise=args.feature_noise,
        camera_arc_degrees=args.arc,
    )
    manifest = generate_synthetic(spec, args.out)
    print(manifest)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        iterations=args.iters,
        blend_lambda=args.blend_lambda,
        seed=args.seed,
        fusion_kind=args.fusion,
        indicator=IndicatorMode.parse(args.indicator),
        blend=BlendConfig.parse(args.blend, args.ratio),
    )


def _scene_init_cloud(scene: SceneData):
    if scene.init_checkpoint is None:
        raise DataError("scene manifest names no init checkpoint to train from")
    return load_checkpoint(scene.init_checkpoint).cloud


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    cfg = _train_config(args)
    result = train(scene.dataset, cfg, _scene_init_cloud(scene))

    out = Path(args.out)
    save_checkpoint(
        CheckpointState(
            cloud=result.cloud,
            fusion=result.fusion,
            indicator=cfg.indicator,
            iteration=cfg.iterations,
            config_hash=config_digest(cfg),
            adam_m=result.adam.m,
            adam_v=result.adam.v,
            adam_steps=result.adam.steps,
        ),
        out,
    )
    write_loss_trace(out / "loss_trace.csv", result.trace)
    final = result.trace[-1] if result.trace else None
    print(f"checkpoint: {out}")
    if final is not None:
        print(f"final: iter={final[0]} total={final[4]!r}")
    return EXIT_OK


def _resolve_camera(args, scene: SceneData):
    spec = args.camera
    if spec.startswith("frame:"):
        try:
            index = int(spec[len("frame:"):])
        except ValueError as exc:
            raise InvalidParameterError(f"bad frame index in {spec!r}") from exc
        if not (0 <= index < len(scene.dataset.samples)):
            raise InvalidParameterError(
                f"frame index {index} out of range (scene has {len(scene.dataset.samples)} frames)"
            )
        return scene.dataset.samples[index].camera
    if spec.lstrip().startswith("{"):
        try:
            return camera_from_dict(json.loads(spec))
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"bad inline camera JSON: {exc}") from exc
    return camera_from_dict(read_json(spec))


def _safe_name(label: str) -> str:
    return "".join(ch if (ch.isalnum() or ch in "-_") else "_" for ch in label)


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    camera = _resolve_camera(args, scene)

    out = rasterize(ckpt.cloud, camera, ckpt.fusion, ckpt.indicator, RasterConfig(use_tiles=True))
    prefix = Path(args.out)
    if prefix.parent != Path(""):
        prefix.parent.mkdir(parents=True, exist_ok=True)

    paths = []

    def emit(suffix, writer, *payload):
        path = Path(f"{prefix}_{suffix}")
        writer(path, *payload)
        paths.append(path)

    emit("color.png", write_image, np.clip(out.color, 0.0, 1.0))
    emit("color.mgst", write_tensor, out.color)
    emit("semantics.mgst", write_tensor, out.semantics)

    if scene.queries is not None:
        rel = relevancy(out.semantics, scene.queries, args.norm_floor)
        for q, label in enumerate(scene.queries.labels):
            name = _safe_name(label)
            emit(f"heat_{name}.png", write_image, heatmap(rel[:, :, q]))
            emit(f"heat_{name}.mgst", write_tensor, rel[:, :, q].copy())

    # Per-Gaussian indicator-vs-opacity gap, the diagnostic for how far the
    # language chain has drifted from the color chain.
    opac = ckpt.cloud.opacities()
    lang = language_opacities(ckpt.cloud, ckpt.indicator, opac)
    counts, edges = np.histogram(lang - opac, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    hist_path = Path(f"{prefix}_lo_histogram.csv")
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for b in range(HISTOGRAM_BINS):
            writer.writerow([repr(float(edges[b])), repr(float(edges[b + 1])), int(counts[b])])
    paths.append(hist_path)

    for path in paths:
        print(path)
    return EXIT_OK


def evaluate_scene(ckpt: CheckpointState, scene: SceneData, norm_floor: float, threshold=None) -> dict:
    """Per-frame metrics of a checkpoint against a scene's annotations.

    Renders every frame once at quality settings; frames lacking the
    annotation a metric needs are skipped for that metric.
    """
    if scene.queries is None:
        raise DataError("scene has no query embeddings; cannot evaluate")
    config = RasterConfig.quality()
    per_frame = []
    miou_vals, acc_vals, psnr_vals, thr_vals = [], [], [], []
    for v, sample in enumerate(scene.dataset.samples):
        out = rasterize(ckpt.cloud, sample.camera, ckpt.fusion, ckpt.indicator, config)
        rel = relevancy(out.semantics, scene.queries, norm_floor)
        row = {"frame": v, "psnr": psnr(out.color, sample.image)}
        psnr_vals.append(row["psnr"])
        label_map = scene.label_maps[v]
        if label_map is not None:
            pred = decode_labels(out.semantics, scene.queries, norm_floor)
            row["miou"] = mean_iou(pred, label_map)
            miou_vals.append(row["miou"])
            if threshold is not None:
                ious = []
                for q in range(len(scene.queries.labels)):
                    gt_mask = label_map == q
                    if not gt_mask.any():
                        continue
                    pred_mask = segment(rel, "threshold", q, threshold)
                    union = np.logical_or(pred_mask, gt_mask).sum()
                    inter = np.logical_and(pred_mask, gt_mask).sum()
                    ious.append(float(inter) / float(union) if union else 1.0)
                if ious:
                    row["threshold_miou"] = float(np.mean(ious))
                    thr_vals.append(row["threshold_miou"])
        boxes = scene.boxes[v]
        if boxes:
            row["localization_accuracy"] = localization_accuracy(rel, boxes)
            acc_vals.append(row["localization_accuracy"])
        per_frame.append(row)

    summary = {"per_frame": per_frame, "psnr": float(np.mean(psnr_vals)) if psnr_vals else None}
    summary["miou"] = float(np.mean(miou_vals)) if miou_vals else None
    summary["localization_accuracy"] = float(np.mean(acc_vals)) if acc_vals else None
    if threshold is not None:
        summary["threshold"] = threshold
        summary["threshold_miou"] = float(np.mean(thr_vals)) if thr_vals else None
    return summary


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    summary = evaluate_scene(ckpt, scene, args.norm_floor, args.threshold)
    if args.mode == "segment" and summary["miou"] is None:
        raise DataError("eval --mode segment: scene has no label maps")
    if args.mode == "localize" and summary["localization_accuracy"] is None:
        raise DataError("eval --mode localize: scene has no boxes")

    payload = {
        "mode": args.mode,
        "checkpoint": str(args.ckpt),
        "scene": str(args.scene),
        "norm_floor": args.norm_floor,
        **summary,
    }
    print(json.dumps(payload, sort_keys=True, indent=1))
    write_json(args.out, payload)
    return EXIT_OK


_ABLATE_AXES = ("fusion", "indicator", "blend", "ratio", "lambda")


def parse_grid(spec: str) -> list:
    """'axis=v1,v2[;axis=...]' -> ordered (axis, values) pairs."""
    pairs = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise InvalidParameterError(f"grid chunk {chunk!r} is not axis=v1,v2")
        axis, _, values = chunk.partition("=")
        axis = axis.strip()
        if axis not in _ABLATE_AXES:
            raise InvalidParameterError(f"unknown grid axis {axis!r}; expected one of {_ABLATE_AXES}")
        if any(axis == seen for seen, _ in pairs):
            raise InvalidParameterError(f"grid axis {axis!r} repeated")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise InvalidParameterError(f"grid axis {axis!r} has no values")
        pairs.append((axis, vals))
    if not pairs:
        raise InvalidParameterError("empty ablation grid")
    return pairs


def _ablate_worker(job):
    scene_path, variant, iters, blend_lambda, seed = job
    scene = load_scene(scene_path)
    if "lambda" in variant:
        blend_lambda = float(variant["lambda"])
    cfg = TrainConfig(
        iterations=iters,
        blend_lambda=blend_lambda,
        seed=seed,
        fusion_kind=variant.get("fusion", "self"),
        indicator=IndicatorMode.parse(variant.get("indicator", "learned")),
        blend=BlendConfig.parse(variant.get("blend", "full"), variant.get("ratio", "beta")),
    )
    result = train(scene.dataset, cfg, _scene_init_cloud(scene))
    state = CheckpointState(cloud=result.cloud, fusion=result.fusion, indicator=cfg.indicator)
    summary = evaluate_scene(state, scene, BACKGROUND_NORM_FLOOR)
    final_total = result.trace[-1][4] if result.trace else float("nan")
    return summary, final_total


def cmd_ablate(args) -> int:
    grid = parse_grid(args.grid)
    load_scene(args.scene)  # fail fast on a bad scene before spawning workers
    axes = [axis for axis, _ in grid]
    variants = [dict(zip(axes, combo)) for combo in itertools.product(*[vals for _, vals in grid])]

    jobs = [(str(args.scene), variant, args.iters, args.blend_lambda, args.seed) for variant in variants]
    workers = 1 if args.deterministic else max(1, args.threads)
    if workers > 1:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            results = pool.map(_ablate_worker, jobs)
    else:
        results = [_ablate_worker(job) for job in jobs]

    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(axes + ["miou", "localization_accuracy", "psnr", "final_total"])
        for variant, (summary, final_total) in zip(variants, results):
            writer.writerow(
                [variant[a] for a in axes]
                + [
                    "" if summary["miou"] is None else repr(summary["miou"]),
                    "" if summary["localization_accuracy"] is None else repr(summary["localization_accuracy"]),
                    "" if summary["psnr"] is None else repr(summary["psnr"]),
                    repr(float(final_total)),
                ]
            )
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, InvalidStateError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
