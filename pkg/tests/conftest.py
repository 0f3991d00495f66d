"""Shared scene builders and the finite-difference harness."""
import numpy as np
import pytest

from vlsplat.fusion import ATTN_DIM_DEFAULT, make_fusion_model
from vlsplat.rasterizer import COLOR_DIM
from vlsplat.scene import Camera, Dataset, GaussianCloud, TrainSample, logit


def make_camera(width=16, height=16, fx=None, fy=None, rotation=None, translation=None):
    """Identity-pose pinhole camera looking down +z unless overridden."""
    return Camera(
        fx=float(fx if fx is not None else width),
        fy=float(fy if fy is not None else (fx if fx is not None else height)),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        rotation=np.array([1.0, 0.0, 0.0, 0.0]) if rotation is None else np.asarray(rotation, dtype=np.float64),
        translation=np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64),
    )


def random_cloud(rng, n, d_f=3, z_range=(2.5, 6.0), spread=1.0, scale_range=(0.08, 0.5)):
    """Random Gaussians strictly in front of the identity-pose camera."""
    positions = np.column_stack(
        [
            rng.uniform(-spread, spread, size=n),
            rng.uniform(-spread, spread, size=n),
            rng.uniform(*z_range, size=n),
        ]
    )
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=positions,
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        rotations=quats,
        opacity_logits=logit(rng.uniform(0.15, 0.9, size=n)),
        colors=rng.uniform(0.0, 1.0, size=(n, 3)),
        features=rng.normal(0.0, 1.0, size=(n, d_f)),
        indicator_logits=logit(rng.uniform(0.1, 0.95, size=n)),
    )


def identity_fusion(d_f=3, rng=None):
    """Self-attention at its zero-output initialization (exact identity)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return make_fusion_model("self", COLOR_DIM, d_f, ATTN_DIM_DEFAULT, rng)


def random_fusion(d_f=3, rng=None, kind="self"):
    """Fusion with a non-zero output map so gradients reach every weight."""
    rng = rng if rng is not None else np.random.default_rng(0)
    model = make_fusion_model(kind, COLOR_DIM, d_f, ATTN_DIM_DEFAULT, rng)
    for name, arr in model.parameters().items():
        arr += rng.normal(0.0, 0.08, size=arr.shape)
    return model


def micro_dataset(seed, n_views=2, size=8, d_f=3):
    """Tiny supervised dataset for gradient checks: random targets, cameras a
    touch apart so the two views genuinely differ."""
    rng = np.random.default_rng(seed)
    samples = []
    for v in range(n_views):
        quat = np.array([1.0, 0.0, 0.0, 0.0]) + 0.05 * rng.normal(size=4) * (v > 0)
        quat /= np.linalg.norm(quat)
        cam = make_camera(size, size, rotation=quat, translation=0.15 * rng.normal(size=3) * (v > 0))
        samples.append(
            TrainSample(
                image=rng.uniform(0.0, 1.0, size=(size, size, COLOR_DIM)),
                camera=cam,
                gt_features=rng.normal(0.0, 0.6, size=(size, size, d_f)),
            )
        )
    return Dataset(samples=samples)


def fd_grad_arrays(objective, arrays, eps=1e-6):
    """Central finite differences of a scalar objective w.r.t. each array in
    a {name: ndarray} dict (arrays are mutated in place and restored)."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = objective()
            flat[i] = keep - eps
            lo = objective()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rel=1e-3, absolute=1e-6, label=""):
    for name in numeric:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        err = np.abs(a - n)
        tol = absolute + rel * np.abs(n)
        worst = np.unravel_index(np.argmax(err - tol), err.shape) if err.size else None
        assert np.all(err <= tol), (
            f"{label}{name}: analytic {a[worst]} vs FD {n[worst]} at {worst} "
            f"(|err|={err[worst]:.3e}, tol={tol[worst]:.3e})"
        )


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    """A tiny generated scene shared by IO/CLI tests (read-only)."""
    from vlsplat.synthetic import SyntheticSpec, generate_synthetic

    root = tmp_path_factory.mktemp("scene") / "s"
    generate_synthetic(SyntheticSpec(n_objects=2, n_views=4, width=24, height=24, seed=5), root)
    return root
