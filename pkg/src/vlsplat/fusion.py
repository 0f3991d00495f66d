"""Per-Gaussian fusion of color and language channels before rasterization.

The D = color_dim + feature_dim scalar channels of x = c (+) f are treated
as tokens with embedding width ``attn_dim``: three linear maps produce Q, K,
V in R^{D x attn_dim}, the attention matrix A = row_softmax(Q K^T /
sqrt(attn_dim)) mixes the channel tokens, and an output map folds the
flattened A V back to R^D as a residual:

    u = x + out(flatten(A @ V))

The output map is zero-initialized, so a fresh fusion layer is exactly the
identity and training starts from unfused channels.

Ablation variants live here too: ``none`` (identity), ``mlp1`` (one linear
layer initialized to the identity), and ``cross`` (the same attention with
same-modality attention logits masked out, so color tokens attend only to
language tokens and vice versa).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidParameterError

ATTN_DIM_DEFAULT = 4
FUSION_KINDS = ("self", "none", "mlp1", "cross")


@dataclasses.dataclass
class AttentionWeights:
    """Global (scene-shared) parameters of the channel-token attention.

    wq/wk/wv: (D*attn_dim, D) with biases (D*attn_dim,); wout: (D, D*attn_dim)
    with bias (D,). The same container is reused to hold gradients.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wout: np.ndarray
    bout: np.ndarray

    @property
    def token_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def attn_dim(self) -> int:
        return self.wq.shape[0] // self.wq.shape[1]

    def validate(self):
        d = self.token_dim
        dh = self.attn_dim
        want = {
            "wq": (d * dh, d),
            "bq": (d * dh,),
            "wk": (d * dh, d),
            "bk": (d * dh,),
            "wv": (d * dh, d),
            "bv": (d * dh,),
            "wout": (d, d * dh),
            "bout": (d,),
        }
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidParameterError(f"AttentionWeights.{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"AttentionWeights.{name}: non-finite entries")

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(*(getattr(self, f.name).copy() for f in dataclasses.fields(self)))


def init_attention_weights(color_dim: int, feature_dim: int, attn_dim: int, rng) -> AttentionWeights:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) for Q/K/V maps, zeros for the output map."""
    d = color_dim + feature_dim
    bound = 1.0 / np.sqrt(d)

    def linear():
        return rng.uniform(-bound, bound, size=(d * attn_dim, d))

    return AttentionWeights(
        wq=linear(),
        bq=np.zeros(d * attn_dim),
        wk=linear(),
        bk=np.zeros(d * attn_dim),
        wv=linear(),
        bv=np.zeros(d * attn_dim),
        wout=np.zeros((d, d * attn_dim)),
        bout=np.zeros(d),
    )


@dataclasses.dataclass
class FusionModel:
    """A fusion variant plus its parameters.

    kind 'self'/'cross' use ``attention``; 'mlp1' uses the linear layer
    arrays; 'none' has no parameters.
    """

    kind: str
    color_dim: int
    feature_dim: int
    attention: AttentionWeights | None = None
    mlp_weight: np.ndarray | None = None
    mlp_bias: np.ndarray | None = None

    @property
    def token_dim(self) -> int:
        return self.color_dim + self.feature_dim

    def parameters(self) -> dict:
        if self.kind in ("self", "cross"):
            w = self.attention
            return {
                "fusion.wq": w.wq,
                "fusion.bq": w.bq,
                "fusion.wk": w.wk,
                "fusion.bk": w.bk,
                "fusion.wv": w.wv,
                "fusion.bv": w.bv,
                "fusion.wout": w.wout,
                "fusion.bout": w.bout,
            }
        if self.kind == "mlp1":
            return {"fusion.mlp_weight": self.mlp_weight, "fusion.mlp_bias": self.mlp_bias}
        return {}

    def set_parameters(self, params: dict):
        for name, arr in params.items():
            field = name.split(".", 1)[1]
            if self.kind in ("self", "cross"):
                setattr(self.attention, field, arr)
            else:
                setattr(self, field, arr)

    def copy(self) -> "FusionModel":
        return FusionModel(
            kind=self.kind,
            color_dim=self.color_dim,
            feature_dim=self.feature_dim,
            attention=self.attention.copy() if self.attention is not None else None,
            mlp_weight=None if self.mlp_weight is None else self.mlp_weight.copy(),
            mlp_bias=None if self.mlp_bias is None else self.mlp_bias.copy(),
        )


def make_fusion_model(kind: str, color_dim: int, feature_dim: int, attn_dim: int, rng) -> FusionModel:
    if kind not in FUSION_KINDS:
        raise InvalidParameterError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    model = FusionModel(kind=kind, color_dim=color_dim, feature_dim=feature_dim)
    if kind in ("self", "cross"):
        model.attention = init_attention_weights(color_dim, feature_dim, attn_dim, rng)
    elif kind == "mlp1":
        d = color_dim + feature_dim
        model.mlp_weight = np.eye(d)
        model.mlp_bias = np.zeros(d)
    return model


def _cross_mask(color_dim: int, feature_dim: int) -> np.ndarray:
    modality = np.array([0] * color_dim + [1] * feature_dim)
    return modality[:, None] != modality[None, :]


def fuse_batch(model: FusionModel, x: np.ndarray):
    """Apply the fusion to (N, D) stacked channels. Returns (u, cache)."""
    x = np.asarray(x, dtype=np.float64)
    d = model.token_dim
    if x.ndim != 2 or x.shape[1] != d:
        raise InvalidParameterError(f"fuse: expected (N, {d}) input, got {x.shape}")

    if model.kind == "none":
        return x.copy(), {"kind": "none", "x": x}

    if model.kind == "mlp1":
        u = x @ model.mlp_weight.T + model.mlp_bias
        return u, {"kind": "mlp1", "x": x}

    w = model.attention
    w.validate()
    n = x.shape[0]
    dh = w.attn_dim
    scale = 1.0 / np.sqrt(dh)

    q = (x @ w.wq.T + w.bq).reshape(n, d, dh)
    k = (x @ w.wk.T + w.bk).reshape(n, d, dh)
    v = (x @ w.wv.T + w.bv).reshape(n, d, dh)

    logits = np.einsum("nik,njk->nij", q, k) * scale
    if model.kind == "cross":
        allowed = _cross_mask(model.color_dim, model.feature_dim)
        logits = np.where(allowed[None, :, :], logits, -np.inf)
    # Row softmax with max subtraction for stability.
    logits = logits - logits.max(axis=2, keepdims=True)
    expl = np.exp(logits)
    attn = expl / expl.sum(axis=2, keepdims=True)

    z = attn @ v
    u = x + z.reshape(n, d * dh) @ w.wout.T + w.bout
    cache = {"kind": model.kind, "x": x, "q": q, "k": k, "v": v, "attn": attn, "z": z}
    return u, cache


def fuse_backward_batch(model: FusionModel, cache: dict, du: np.ndarray):
    """Gradients of sum(du * fuse(x)) w.r.t. x and the fusion parameters.

    Returns (dx, grads) with grads keyed like ``model.parameters()``.
    Parameter gradients are reduced over the batch in storage order, so the
    accumulation is deterministic.
    """
    du = np.asarray(du, dtype=np.float64)
    x = cache["x"]
    if du.shape != x.shape:
        raise InvalidParameterError("fuse_backward: du shape mismatch")
    if cache["kind"] != model.kind:
        raise InvalidParameterError("fuse_backward: cache built for a different fusion kind")

    if model.kind == "none":
        return du.copy(), {}

    if model.kind == "mlp1":
        dx = du @ model.mlp_weight
        grads = {
            "fusion.mlp_weight": du.T @ x,
            "fusion.mlp_bias": du.sum(axis=0),
        }
        return dx, grads

    w = model.attention
    n, d = x.shape
    dh = w.attn_dim
    scale = 1.0 / np.sqrt(dh)
    q, k, v, attn, z = cache["q"], cache["k"], cache["v"], cache["attn"], cache["z"]

    dx = du.copy()
    z_flat = z.reshape(n, d * dh)
    d_wout = du.T @ z_flat
    d_bout = du.sum(axis=0)
    dz = (du @ w.wout).reshape(n, d, dh)

    d_attn = np.einsum("nik,njk->nij", dz, v)
    dv = np.einsum("nji,njk->nik", attn, dz)
    # Softmax backward per row; masked-out entries have attn = 0 and thus
    # contribute nothing.
    inner = (d_attn * attn).sum(axis=2, keepdims=True)
    d_logits = attn * (d_attn - inner)
    dq = np.einsum("nij,njk->nik", d_logits, k) * scale
    dk = np.einsum("nji,njk->nik", d_logits, q) * scale

    grads = {}
    for name, grad_heads in (("q", dq), ("k", dk), ("v", dv)):
        flat = grad_heads.reshape(n, d * dh)
        grads[f"fusion.w{name}"] = flat.T @ x
        grads[f"fusion.b{name}"] = flat.sum(axis=0)
        dx += flat @ getattr(w, f"w{name}")
    grads["fusion.wout"] = d_wout
    grads["fusion.bout"] = d_bout
    return dx, grads


def _single_model(w: AttentionWeights, color_dim: int, feature_dim: int) -> FusionModel:
    return FusionModel(kind="self", color_dim=color_dim, feature_dim=feature_dim, attention=w)


def fuse(c, f, w: AttentionWeights):
    """Fused channel vector u for a single Gaussian (self-attention path)."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if c.size + f.size != w.token_dim:
        raise InvalidParameterError("fuse: channel widths inconsistent with weights")
    model = _single_model(w, c.size, f.size)
    u, _ = fuse_batch(model, np.concatenate([c, f])[None, :])
    return u[0]


def fuse_backward(c, f, w: AttentionWeights, du):
    """Gradients of <du, fuse(c, f, w)>; returns (dc, df, dw).

    ``dw`` is an :class:`AttentionWeights` holding the parameter gradients.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    du = np.asarray(du, dtype=np.float64).reshape(-1)
    model = _single_model(w, c.size, f.size)
    _, cache = fuse_batch(model, np.concatenate([c, f])[None, :])
    dx, grads = fuse_backward_batch(model, cache, du[None, :])
    dw = AttentionWeights(
        wq=grads["fusion.wq"],
        bq=grads["fusion.bq"],
        wk=grads["fusion.wk"],
        bk=grads["fusion.bk"],
        wv=grads["fusion.wv"],
        bv=grads["fusion.bv"],
        wout=grads["fusion.wout"],
        bout=grads["fusion.bout"],
    )
    return dx[0, : c.size], dx[0, c.size :], dw
