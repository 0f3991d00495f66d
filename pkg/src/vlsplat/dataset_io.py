"""On-disk formats: tensor files, PNG images, scene manifests, checkpoints.

TensorFile is a deliberately minimal binary format, parseable from any
language: magic "MGST", version u32 (=1), rank u32, dims rank x u32, a dtype
byte, then the little-endian row-major payload. dtype 0 is float32 (4 bytes
per element); dtype 1 is a float64 extension (8 bytes) used where bit-exact
round trips of training state matter. Anything malformed raises DataError.

A checkpoint is a directory: index.json plus one .mgst block per tensor
(cloud fields, fusion parameters, Adam moments). A scene is a directory with
manifest.json, per-frame PNG images and feature tensors, optional label
maps/boxes/query embeddings, and optional init/GT checkpoints.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvalidParameterError
from .fusion import AttentionWeights, FusionModel
from .query import QuerySet
from .rasterizer import IndicatorMode
from .scene import Camera, Dataset, GaussianCloud, TrainSample

TENSOR_MAGIC = b"MGST"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_RANK = 32

CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
CLOUD_BLOCKS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "colors",
    "features",
    "indicator_logits",
)


def write_tensor(path, array: np.ndarray):
    """Serialize a float32/float64 array. Other dtypes are rejected rather
    than silently converted."""
    array = np.asarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise InvalidParameterError(f"write_tensor: unsupported dtype {array.dtype}")
    header = struct.pack("<4sII", TENSOR_MAGIC, TENSOR_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array).tobytes())


def read_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"read_tensor: cannot read {path}: {exc}") from exc
    if len(blob) < 13:
        raise DataError(f"read_tensor: {path}: truncated header")
    magic, version, rank = struct.unpack_from("<4sII", blob, 0)
    if magic != TENSOR_MAGIC:
        raise DataError(f"read_tensor: {path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise DataError(f"read_tensor: {path}: unsupported version {version}")
    if rank > _MAX_RANK:
        raise DataError(f"read_tensor: {path}: implausible rank {rank}")
    offset = 12
    if len(blob) < offset + 4 * rank + 1:
        raise DataError(f"read_tensor: {path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    (code,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise DataError(f"read_tensor: {path}: unknown dtype code {code}")
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.itemsize
    if len(blob) - offset != expected:
        raise DataError(
            f"read_tensor: {path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


def write_image(path, image: np.ndarray):
    """[0,1] float (H, W, 3) -> 8-bit RGB PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidParameterError(f"write_image: expected (H, W, 3), got {image.shape}")
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DataError(f"read_image: cannot read {path}: {exc}") from exc
    return data / 255.0


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "quaternion": [float(x) for x in cam.rotation],
        "translation": [float(x) for x in cam.translation],
    }


def camera_from_dict(data: dict) -> Camera:
    try:
        return Camera(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=np.asarray(data["quaternion"], dtype=np.float64),
            translation=np.asarray(data["translation"], dtype=np.float64),
        )
    except KeyError as exc:
        raise DataError(f"camera record is missing field {exc}") from exc


def write_json(path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from exc


@dataclasses.dataclass
class SceneData:
    """A loaded scene: the trainable dataset plus whatever annotations the
    manifest carries (label maps, boxes, queries, init/GT checkpoints)."""

    root: Path
    dataset: Dataset
    labels: list
    queries: QuerySet | None
    label_maps: list  # per frame: (H, W) int64 map or None
    boxes: list       # per frame: {query index: (x0, y0, x1, y1)} or None
    init_checkpoint: Path | None
    gt_checkpoint: Path | None


def load_scene(path) -> SceneData:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"load_scene: no manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"load_scene: unsupported manifest version {manifest.get('format_version')}")
    d_f = int(manifest["d_f"])
    labels = list(manifest.get("labels", []))

    samples = []
    label_maps = []
    boxes = []
    for frame in manifest["frames"]:
        image_path = root / frame["image_path"]
        feature_path = root / frame["feature_path"]
        for p in (image_path, feature_path):
            if not p.exists():
                raise DataError(f"load_scene: missing file {p}")
        image = read_image(image_path)
        features = read_tensor(feature_path).astype(np.float64)
        camera = camera_from_dict(frame["camera"])
        if features.ndim != 3 or features.shape[2] != d_f:
            raise DataError(f"load_scene: {feature_path} is {features.shape}, want (H, W, {d_f})")
        if features.shape[:2] != image.shape[:2]:
            raise DataError(f"load_scene: {feature_path} does not match image {image_path}")
        try:
            samples.append(TrainSample(image=image, camera=camera, gt_features=features))
        except InvalidParameterError as exc:
            raise DataError(f"load_scene: inconsistent frame {frame['image_path']}: {exc}") from exc

        if frame.get("label_map_path"):
            lm_path = root / frame["label_map_path"]
            if not lm_path.exists():
                raise DataError(f"load_scene: missing file {lm_path}")
            lm = read_tensor(lm_path)
            if lm.shape != image.shape[:2]:
                raise DataError(f"load_scene: label map {lm_path} shape {lm.shape} mismatch")
            label_maps.append(np.rint(lm).astype(np.int64))
        else:
            label_maps.append(None)
        if frame.get("boxes"):
            frame_boxes = {}
            for name, box in frame["boxes"].items():
                if name not in labels:
                    raise DataError(f"load_scene: box for unknown label {name!r}")
                frame_boxes[labels.index(name)] = tuple(int(v) for v in box)
            boxes.append(frame_boxes)
        else:
            boxes.append(None)

    queries = None
    if manifest.get("query_embeddings_path"):
        q_path = root / manifest["query_embeddings_path"]
        if not q_path.exists():
            raise DataError(f"load_scene: missing file {q_path}")
        embeddings = read_tensor(q_path).astype(np.float64)
        if embeddings.shape != (len(labels), d_f):
            raise DataError(
                f"load_scene: query embeddings {embeddings.shape}, want ({len(labels)}, {d_f})"
            )
        queries = QuerySet(labels=labels, embeddings=embeddings)

    def _ckpt(key):
        rel = manifest.get(key)
        return (root / rel) if rel else None

    return SceneData(
        root=root,
        dataset=Dataset(samples=samples),
        labels=labels,
        queries=queries,
        label_maps=label_maps,
        boxes=boxes,
        init_checkpoint=_ckpt("init_checkpoint"),
        gt_checkpoint=_ckpt("gt_checkpoint"),
    )


@dataclasses.dataclass
class CheckpointState:
    """Everything needed to resume or evaluate a run."""

    cloud: GaussianCloud
    fusion: FusionModel
    indicator: IndicatorMode = IndicatorMode("dual")
    iteration: int = 0
    config_hash: str = ""
    adam_m: dict = dataclasses.field(default_factory=dict)
    adam_v: dict = dataclasses.field(default_factory=dict)
    adam_steps: dict = dataclasses.field(default_factory=dict)


def _block_filename(logical: str) -> str:
    return logical.replace(".", "__") + ".mgst"


def save_checkpoint(state: CheckpointState, path):
    """Write a checkpoint directory; float64 blocks make the round trip
    bit-exact."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blocks = {name: getattr(state.cloud, name) for name in CLOUD_BLOCKS}
    blocks.update(state.fusion.parameters())
    for name, arr in state.adam_m.items():
        blocks[f"adam_m.{name}"] = arr
    for name, arr in state.adam_v.items():
        blocks[f"adam_v.{name}"] = arr

    block_files = {}
    for logical in sorted(blocks):
        fname = _block_filename(logical)
        write_tensor(root / fname, np.asarray(blocks[logical], dtype=np.float64))
        block_files[logical] = fname

    attn_dim = state.fusion.attention.attn_dim if state.fusion.attention is not None else 0
    index = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "iteration": int(state.iteration),
        "indicator": state.indicator.describe(),
        "fusion_kind": state.fusion.kind,
        "color_dim": state.fusion.color_dim,
        "feature_dim": state.fusion.feature_dim,
        "attn_dim": attn_dim,
        "adam_steps": {k: int(v) for k, v in sorted(state.adam_steps.items())},
        "blocks": block_files,
    }
    write_json(root / "index.json", index)


def load_checkpoint(path) -> CheckpointState:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DataError(f"load_checkpoint: no index.json in {root}")
    index = read_json(index_path)
    if index.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"load_checkpoint: unsupported version {index.get('format_version')}")

    blocks = {}
    for logical, fname in index["blocks"].items():
        fpath = root / fname
        if not fpath.exists():
            raise DataError(f"load_checkpoint: missing block {fpath}")
        blocks[logical] = read_tensor(fpath).astype(np.float64)

    try:
        cloud = GaussianCloud(**{name: blocks[name] for name in CLOUD_BLOCKS})
    except KeyError as exc:
        raise DataError(f"load_checkpoint: missing cloud block {exc}") from exc

    kind = index["fusion_kind"]
    color_dim = int(index["color_dim"])
    feature_dim = int(index["feature_dim"])
    fusion = FusionModel(kind=kind, color_dim=color_dim, feature_dim=feature_dim)
    if kind in ("self", "cross"):
        try:
            fusion.attention = AttentionWeights(
                wq=blocks["fusion.wq"], bq=blocks["fusion.bq"],
                wk=blocks["fusion.wk"], bk=blocks["fusion.bk"],
                wv=blocks["fusion.wv"], bv=blocks["fusion.bv"],
                wout=blocks["fusion.wout"], bout=blocks["fusion.bout"],
            )
        except KeyError as exc:
            raise DataError(f"load_checkpoint: missing fusion block {exc}") from exc
        fusion.attention.validate()
    elif kind == "mlp1":
        try:
            fusion.mlp_weight = blocks["fusion.mlp_weight"]
            fusion.mlp_bias = blocks["fusion.mlp_bias"]
        except KeyError as exc:
            raise DataError(f"load_checkpoint: missing fusion block {exc}") from exc
    elif kind != "none":
        raise DataError(f"load_checkpoint: unknown fusion kind {kind!r}")

    adam_m = {k[len("adam_m."):]: v for k, v in blocks.items() if k.startswith("adam_m.")}
    adam_v = {k[len("adam_v."):]: v for k, v in blocks.items() if k.startswith("adam_v.")}
    return CheckpointState(
        cloud=cloud,
        fusion=fusion,
        indicator=IndicatorMode.parse(index["indicator"]),
        iteration=int(index["iteration"]),
        config_hash=index.get("config_hash", ""),
        adam_m=adam_m,
        adam_v=adam_v,
        adam_steps={k: int(v) for k, v in index.get("adam_steps", {}).items()},
    )
