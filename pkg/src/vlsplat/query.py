"""Open-vocabulary relevancy maps and their segmentation/localization decode.

Relevancy is the softmax (over the query set, no temperature) of cosine
similarities between the rendered per-pixel language feature and each query
embedding. Text encoding happens offline: queries arrive as precomputed
embedding vectors.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidParameterError

# Rendered features are alpha-composited, so empty space carries only faint
# tails of nearby Gaussians. Cosine similarity is scale-invariant and would
# happily classify those tails; pixels whose feature norm falls below this
# floor are treated as background when decoding label maps.
BACKGROUND_NORM_FLOOR = 0.25
BACKGROUND_LABEL = -1


@dataclasses.dataclass
class QuerySet:
    """Ordered open-vocabulary queries with their embeddings (Q, d_f)."""

    labels: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.labels):
            raise InvalidParameterError("QuerySet: embeddings must be (len(labels), d_f)")
        if len(self.labels) < 1:
            raise InvalidParameterError("QuerySet: at least one query required")
        if not np.all(np.isfinite(self.embeddings)):
            raise InvalidParameterError("QuerySet: non-finite embedding")
        if np.any(np.linalg.norm(self.embeddings, axis=1) == 0.0):
            raise InvalidParameterError("QuerySet: zero-norm embedding")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def relevancy(feature_map: np.ndarray, queries: QuerySet, norm_floor: float = 0.0) -> np.ndarray:
    """Per-pixel softmax over cosine similarities; returns (H, W, Q) probs.

    Pixels whose feature norm is <= norm_floor get cosine 0 to every query
    (uniform relevancy). The default floor 0 affects exactly the zero-norm
    pixels; label-map decoding passes BACKGROUND_NORM_FLOOR instead.
    """
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if feature_map.ndim != 3 or feature_map.shape[2] != queries.dim:
        raise InvalidParameterError(
            f"relevancy: feature map {feature_map.shape} does not match query width {queries.dim}"
        )
    norms = np.linalg.norm(feature_map, axis=2)
    safe = np.where(norms > norm_floor, norms, 1.0)
    unit = feature_map / safe[:, :, None]
    unit = np.where((norms > norm_floor)[:, :, None], unit, 0.0)
    q_unit = queries.embeddings / np.linalg.norm(queries.embeddings, axis=1, keepdims=True)
    cos = np.einsum("hwd,qd->hwq", unit, q_unit)
    cos = cos - cos.max(axis=2, keepdims=True)
    expc = np.exp(cos)
    return expc / expc.sum(axis=2, keepdims=True)


def segment(rel: np.ndarray, mode: str = "argmax", query_index: int | None = None, threshold: float = 0.5):
    """argmax: per-pixel most-probable query index (ties -> lowest index).
    threshold: boolean mask rel[:, :, query_index] >= threshold."""
    rel = np.asarray(rel)
    if rel.ndim != 3:
        raise InvalidParameterError("segment: expected (H, W, Q) relevancy")
    if mode == "argmax":
        return np.argmax(rel, axis=2)
    if mode == "threshold":
        if query_index is None or not (0 <= query_index < rel.shape[2]):
            raise InvalidParameterError(f"segment: query index {query_index} out of range")
        return rel[:, :, query_index] >= threshold
    raise InvalidParameterError(f"segment: unknown mode {mode!r}")


def decode_labels(
    feature_map: np.ndarray,
    queries: QuerySet,
    norm_floor: float = BACKGROUND_NORM_FLOOR,
) -> np.ndarray:
    """Label map from a rendered feature map: argmax relevancy, with pixels
    below the feature-norm floor mapped to BACKGROUND_LABEL."""
    rel = relevancy(feature_map, queries, norm_floor=norm_floor)
    labels = segment(rel, "argmax").astype(np.int64)
    background = np.linalg.norm(np.asarray(feature_map, dtype=np.float64), axis=2) <= norm_floor
    labels[background] = BACKGROUND_LABEL
    return labels


def localize(rel: np.ndarray, query_index: int):
    """(row, col) of the maximum-relevancy pixel for one query; ties resolve
    to the row-major first pixel."""
    rel = np.asarray(rel)
    if rel.ndim != 3 or not (0 <= query_index < rel.shape[2]):
        raise InvalidParameterError("localize: bad relevancy map or query index")
    flat = np.argmax(rel[:, :, query_index])
    return tuple(int(x) for x in np.unravel_index(flat, rel.shape[:2]))


def mean_iou(pred: np.ndarray, gt: np.ndarray, background: int = BACKGROUND_LABEL) -> float:
    """Mean IoU over the classes present in either map (background excluded).

    Taking the union of present classes keeps the metric symmetric in its
    arguments; hallucinated classes count as IoU 0 rather than vanishing.
    Two all-background maps agree perfectly -> 1.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"mean_iou: shape mismatch {pred.shape} vs {gt.shape}")
    classes = sorted(set(np.unique(pred)) | set(np.unique(gt)))
    classes = [c for c in classes if c != background]
    if not classes:
        return 1.0
    scores = []
    for c in classes:
        p = pred == c
        g = gt == c
        union = np.count_nonzero(p | g)
        inter = np.count_nonzero(p & g)
        scores.append(inter / union)
    return float(np.mean(scores))


def point_in_box(point, box) -> bool:
    """box is (x0, y0, x1, y1) inclusive, x = column, y = row."""
    row, col = point
    x0, y0, x1, y1 = box
    return x0 <= col <= x1 and y0 <= row <= y1


def localization_accuracy(rel: np.ndarray, boxes: dict) -> float:
    """Fraction of queries (those that have a GT box) whose argmax-relevancy
    pixel falls inside their box. boxes: query index -> (x0, y0, x1, y1)."""
    if not boxes:
        raise InvalidParameterError("localization_accuracy: no ground-truth boxes")
    hits = 0
    for q, box in boxes.items():
        if point_in_box(localize(rel, int(q)), box):
            hits += 1
    return hits / len(boxes)


def metrics(pred: np.ndarray, gt: np.ndarray, rel: np.ndarray | None = None, boxes: dict | None = None) -> dict:
    """Bundle of the two evaluation metrics; localization is included when a
    relevancy map and boxes are supplied."""
    result = {"miou": mean_iou(pred, gt)}
    if rel is not None and boxes:
        result["localization_accuracy"] = localization_accuracy(rel, boxes)
    return result
